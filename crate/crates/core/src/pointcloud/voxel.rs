use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

pub type GridKey = [i64; 3];

/// Points bucketed into a uniform grid.
///
/// Voxels are ordered by their integer grid key, so the layout does not
/// depend on the order of the input points.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    pub keys: Vec<GridKey>,
    /// Mean coordinate of member points.
    pub coords: Vec<[f64; 3]>,
    /// Mean color of member points.
    pub colors: Vec<[f64; 3]>,
    pub point_to_voxel: Vec<usize>,
    pub voxel_to_points: Vec<Vec<usize>>,
    pub num_classes: usize,
    /// Majority semantic label (ties to the lower label).
    pub semantic: Option<Vec<usize>>,
    /// Majority instance id (ties to the lower id).
    pub instance: Option<Vec<u32>>,
    /// Centroid of the majority instance over all of its points; `None` for
    /// voxels whose majority instance is background.
    pub centers: Option<Vec<Option<[f64; 3]>>>,
}

/// Grid adjacency used when aggregating voxel features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Faces,
    #[serde(rename = "18")]
    Edges,
    #[serde(rename = "26")]
    Corners,
}

impl Connectivity {
    fn admits(self, d: GridKey) -> bool {
        let nonzero = d.iter().filter(|&&v| v != 0).count();
        match self {
            Connectivity::Faces => nonzero == 1,
            Connectivity::Edges => (1..=2).contains(&nonzero),
            Connectivity::Corners => nonzero >= 1,
        }
    }
}

pub fn grid_key(p: &[f64; 3], voxel_size: f64) -> GridKey {
    [
        (p[0] / voxel_size).floor() as i64,
        (p[1] / voxel_size).floor() as i64,
        (p[2] / voxel_size).floor() as i64,
    ]
}

fn majority<T: Copy + Ord + std::hash::Hash>(values: impl Iterator<Item = T>) -> T {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    // BTreeMap iterates ascending; strict `>` keeps the lowest value on ties.
    let mut best: Option<(T, usize)> = None;
    for (v, c) in counts {
        if best.map_or(true, |(_, bc)| c > bc) {
            best = Some((v, c));
        }
    }
    best.expect("voxel has members").0
}

pub fn voxelize(pc: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidVoxelSize(voxel_size));
    }
    let mut buckets: BTreeMap<GridKey, Vec<usize>> = BTreeMap::new();
    for (i, p) in pc.coords.iter().enumerate() {
        buckets.entry(grid_key(p, voxel_size)).or_default().push(i);
    }

    let m = buckets.len();
    let mut keys = Vec::with_capacity(m);
    let mut coords = Vec::with_capacity(m);
    let mut colors = Vec::with_capacity(m);
    let mut voxel_to_points = Vec::with_capacity(m);
    let mut point_to_voxel = vec![0; pc.len()];
    for (v, (key, members)) in buckets.into_iter().enumerate() {
        let inv = 1.0 / members.len() as f64;
        let mut c = [0.0; 3];
        let mut f = [0.0; 3];
        for &i in &members {
            point_to_voxel[i] = v;
            for a in 0..3 {
                c[a] += pc.coords[i][a];
                f[a] += pc.colors[i][a];
            }
        }
        coords.push(c.map(|x| x * inv));
        colors.push(f.map(|x| x * inv));
        keys.push(key);
        voxel_to_points.push(members);
    }

    let (semantic, instance, centers) = match (&pc.semantic, &pc.instance) {
        (Some(sem), Some(inst)) => {
            let vsem = voxel_to_points
                .iter()
                .map(|pts| majority(pts.iter().map(|&i| sem[i])))
                .collect();
            let vinst: Vec<u32> = voxel_to_points
                .iter()
                .map(|pts| majority(pts.iter().map(|&i| inst[i])))
                .collect();
            let centroids = instance_centroids(&pc.coords, inst);
            let centers = vinst
                .iter()
                .map(|&id| (id != 0).then(|| centroids[&id]))
                .collect();
            (Some(vsem), Some(vinst), Some(centers))
        }
        _ => (None, None, None),
    };

    Ok(VoxelGrid {
        voxel_size,
        keys,
        coords,
        colors,
        point_to_voxel,
        voxel_to_points,
        num_classes: pc.num_classes,
        semantic,
        instance,
        centers,
    })
}

/// Centroid of every nonzero instance over all of its points.
pub fn instance_centroids(coords: &[[f64; 3]], instance: &[u32]) -> HashMap<u32, [f64; 3]> {
    let mut acc: HashMap<u32, ([f64; 3], usize)> = HashMap::new();
    for (p, &id) in coords.iter().zip(instance) {
        if id == 0 {
            continue;
        }
        let e = acc.entry(id).or_insert(([0.0; 3], 0));
        for a in 0..3 {
            e.0[a] += p[a];
        }
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(id, (s, n))| (id, s.map(|v| v / n as f64)))
        .collect()
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.point_to_voxel.len()
    }

    pub fn key_index(&self) -> HashMap<GridKey, usize> {
        self.keys.iter().enumerate().map(|(i, &k)| (k, i)).collect()
    }

    /// Occupied grid neighbors of every voxel (the voxel itself excluded),
    /// each list ascending.
    pub fn neighbors(&self, connectivity: Connectivity) -> Vec<Vec<usize>> {
        let index = self.key_index();
        let mut offsets = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let d = [dx, dy, dz];
                    if connectivity.admits(d) {
                        offsets.push(d);
                    }
                }
            }
        }
        self.keys
            .iter()
            .map(|k| {
                let mut out: Vec<usize> = offsets
                    .iter()
                    .filter_map(|d| index.get(&[k[0] + d[0], k[1] + d[1], k[2] + d[2]]).copied())
                    .collect();
                out.sort_unstable();
                out
            })
            .collect()
    }

    /// Coordinates normalized to [0, 1] per axis by the voxel bounding box;
    /// degenerate axes map to 0.5.
    pub fn normalized_coords(&self) -> Vec<[f64; 3]> {
        let (lo, hi) = super::cloud::bounds(&self.coords);
        self.coords
            .iter()
            .map(|c| {
                let mut out = [0.5; 3];
                for a in 0..3 {
                    let range = hi[a] - lo[a];
                    if range > 1e-12 {
                        out[a] = (c[a] - lo[a]) / range;
                    }
                }
                out
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(coords: Vec<[f64; 3]>) -> PointCloud {
        let n = coords.len();
        PointCloud::new(coords, vec![[0.5; 3]; n], 2).unwrap()
    }

    #[test]
    fn singleton() {
        let g = voxelize(&cloud(vec![[0.005, 0.0, 0.0]]), 0.02).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.coords[0], [0.005, 0.0, 0.0]);
    }

    #[test]
    fn two_points_share_a_voxel() {
        let g = voxelize(&cloud(vec![[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]]), 0.02).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.coords[0], [0.005, 0.0, 0.0]);
        assert_eq!(g.voxel_to_points[0], vec![0, 1]);
    }

    #[test]
    fn two_points_separated_by_grid() {
        let g = voxelize(&cloud(vec![[0.0, 0.0, 0.0], [0.03, 0.0, 0.0]]), 0.02).unwrap();
        assert_eq!(g.len(), 2);
        assert_ne!(g.point_to_voxel[0], g.point_to_voxel[1]);
    }

    #[test]
    fn errors() {
        let empty = PointCloud::new(vec![], vec![], 2).unwrap();
        assert!(matches!(voxelize(&empty, 0.02), Err(Error::EmptyCloud)));
        let one = cloud(vec![[0.0; 3]]);
        assert!(matches!(voxelize(&one, 0.0), Err(Error::InvalidVoxelSize(_))));
        assert!(matches!(voxelize(&one, -1.0), Err(Error::InvalidVoxelSize(_))));
    }

    #[test]
    fn majority_labels_and_centers() {
        // Voxel 0 holds points of instances 1, 1, 2; voxel 1 holds background.
        let coords = vec![
            [0.001, 0.0, 0.0],
            [0.002, 0.0, 0.0],
            [0.003, 0.0, 0.0],
            [0.5, 0.0, 0.0],
            [0.101, 0.0, 0.0],
        ];
        let pc = PointCloud::new(coords, vec![[0.1; 3]; 5], 3)
            .unwrap()
            .with_labels(vec![0, 0, 1, 3, 0], vec![1, 1, 2, 0, 1])
            .unwrap();
        let g = voxelize(&pc, 0.02).unwrap();
        let v0 = g.point_to_voxel[0];
        assert_eq!(g.semantic.as_ref().unwrap()[v0], 0);
        assert_eq!(g.instance.as_ref().unwrap()[v0], 1);
        // Instance 1 centroid uses all three of its points, including the one
        // in another voxel.
        let c = g.centers.as_ref().unwrap()[v0].unwrap();
        assert!((c[0] - (0.001 + 0.002 + 0.101) / 3.0).abs() < 1e-15);
        let bg = g.point_to_voxel[3];
        assert!(g.centers.as_ref().unwrap()[bg].is_none());
    }

    #[test]
    fn semantic_tie_goes_to_lower_label() {
        let pc = PointCloud::new(vec![[0.0; 3], [0.001; 3]], vec![[0.0; 3]; 2], 3)
            .unwrap()
            .with_labels(vec![2, 1], vec![5, 6])
            .unwrap();
        let g = voxelize(&pc, 0.02).unwrap();
        assert_eq!(g.semantic.unwrap()[0], 1);
        assert_eq!(g.instance.unwrap()[0], 5);
    }

    #[test]
    fn face_neighbors_of_a_line() {
        let g = voxelize(
            &cloud(vec![[0.01, 0.01, 0.01], [0.03, 0.01, 0.01], [0.05, 0.01, 0.01], [0.07, 0.03, 0.01]]),
            0.02,
        )
        .unwrap();
        let n6 = g.neighbors(Connectivity::Faces);
        assert_eq!(n6, vec![vec![1], vec![0, 2], vec![1], vec![]]);
        let n26 = g.neighbors(Connectivity::Corners);
        assert_eq!(n26[3], vec![2]);
    }

    fn arb_points() -> impl Strategy<Value = Vec<[f64; 3]>> {
        prop::collection::vec(
            (-0.2f64..0.2, -0.2f64..0.2, -0.2f64..0.2).prop_map(|(x, y, z)| [x, y, z]),
            1..80,
        )
    }

    proptest! {
        #[test]
        fn mapping_is_a_partition(points in arb_points()) {
            let g = voxelize(&cloud(points.clone()), 0.05).unwrap();
            let mut seen = vec![0usize; points.len()];
            for (v, members) in g.voxel_to_points.iter().enumerate() {
                prop_assert!(!members.is_empty());
                for &p in members {
                    seen[p] += 1;
                    prop_assert_eq!(g.point_to_voxel[p], v);
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            for (v, members) in g.voxel_to_points.iter().enumerate() {
                for a in 0..3 {
                    let mean = members.iter().map(|&p| points[p][a]).sum::<f64>() / members.len() as f64;
                    prop_assert!((g.coords[v][a] - mean).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn permutation_invariant(points in arb_points(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = points.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = voxelize(&cloud(points), 0.05).unwrap();
            let b = voxelize(&cloud(shuffled), 0.05).unwrap();
            prop_assert_eq!(&a.keys, &b.keys);
            for (x, y) in a.coords.iter().zip(&b.coords) {
                for k in 0..3 {
                    prop_assert!((x[k] - y[k]).abs() < 1e-12);
                }
            }
        }
    }
}
