//! Graph-based over-segmentation of voxels into superpoints.
//!
//! The graph joins every voxel to its `k` nearest voxels (found through the
//! voxel grid itself). Edge weight is the coordinate distance in voxel units
//! plus the color distance. Components are merged Felzenszwalb–Huttenlocher
//! style: an edge joins two components when its weight does not exceed
//! either component's internal difference plus `threshold / size`.

use std::collections::HashMap;
use std::sync::Arc;

use super::voxel::{GridKey, VoxelGrid};
use crate::error::{Error, Result};
use crate::tensor::Groups;

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpointPartition {
    pub voxel_to_superpoint: Vec<usize>,
    pub superpoint_to_voxels: Vec<Vec<usize>>,
}

impl SuperpointPartition {
    /// Builds a partition from per-voxel component labels, numbering
    /// superpoints by their smallest voxel index.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut superpoint_to_voxels: Vec<Vec<usize>> = Vec::new();
        let voxel_to_superpoint = labels
            .iter()
            .enumerate()
            .map(|(v, l)| {
                let s = *remap.entry(*l).or_insert_with(|| {
                    superpoint_to_voxels.push(Vec::new());
                    superpoint_to_voxels.len() - 1
                });
                superpoint_to_voxels[s].push(v);
                s
            })
            .collect();
        Self {
            voxel_to_superpoint,
            superpoint_to_voxels,
        }
    }

    /// Every voxel its own superpoint.
    pub fn identity(m: usize) -> Self {
        Self::from_labels(&(0..m).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.superpoint_to_voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superpoint_to_voxels.is_empty()
    }

    pub fn num_voxels(&self) -> usize {
        self.voxel_to_superpoint.len()
    }

    pub fn groups(&self) -> Groups {
        Arc::new(self.superpoint_to_voxels.clone())
    }

    /// Superpoint of every original point.
    pub fn point_to_superpoint(&self, grid: &VoxelGrid) -> Vec<usize> {
        grid.point_to_voxel
            .iter()
            .map(|&v| self.voxel_to_superpoint[v])
            .collect()
    }

    pub fn is_partition(&self) -> bool {
        let m = self.voxel_to_superpoint.len();
        let mut seen = vec![false; m];
        for (s, members) in self.superpoint_to_voxels.iter().enumerate() {
            if members.is_empty() {
                return false;
            }
            for &v in members {
                if v >= m || seen[v] || self.voxel_to_superpoint[v] != s {
                    return false;
                }
                seen[v] = true;
            }
        }
        seen.into_iter().all(|b| b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn edge_weight(grid: &VoxelGrid, a: usize, b: usize) -> f64 {
    dist(&grid.coords[a], &grid.coords[b]) / grid.voxel_size + dist(&grid.colors[a], &grid.colors[b])
}

/// `k` nearest voxels of each voxel by coordinate distance, ties broken by
/// index. Search walks Chebyshev rings of grid cells outward and stops once
/// the k-th candidate is provably closer than anything unvisited.
pub fn knn(grid: &VoxelGrid, k: usize) -> Vec<Vec<usize>> {
    let m = grid.len();
    let k = k.min(m.saturating_sub(1));
    if k == 0 {
        return vec![Vec::new(); m];
    }
    let index = grid.key_index();
    let (lo, hi) = key_bounds(&grid.keys);
    let max_ring = (0..3).map(|a| hi[a] - lo[a]).max().unwrap_or(0);

    (0..m)
        .map(|i| {
            let center = grid.keys[i];
            let mut cands: Vec<(f64, usize)> = Vec::new();
            let mut ring = 0i64;
            loop {
                for_each_in_ring(center, ring, |key| {
                    if let Some(&j) = index.get(&key) {
                        if j != i {
                            cands.push((dist(&grid.coords[i], &grid.coords[j]), j));
                        }
                    }
                });
                if cands.len() >= k {
                    cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                    if cands[k - 1].0 <= ring as f64 * grid.voxel_size || ring >= max_ring {
                        break;
                    }
                }
                if ring >= max_ring {
                    break;
                }
                ring += 1;
            }
            cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            cands.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

fn key_bounds(keys: &[GridKey]) -> (GridKey, GridKey) {
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for k in keys {
        for a in 0..3 {
            lo[a] = lo[a].min(k[a]);
            hi[a] = hi[a].max(k[a]);
        }
    }
    (lo, hi)
}

fn for_each_in_ring(c: GridKey, r: i64, mut f: impl FnMut(GridKey)) {
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                if dx.abs().max(dy.abs()).max(dz.abs()) == r {
                    f([c[0] + dx, c[1] + dy, c[2] + dz]);
                }
            }
        }
    }
}

/// Undirected kNN edges sorted by `(weight, a, b)` with `a < b`.
pub fn knn_edges(grid: &VoxelGrid, k: usize) -> Vec<Edge> {
    let mut pairs: Vec<(usize, usize)> = knn(grid, k)
        .into_iter()
        .enumerate()
        .flat_map(|(i, ns)| ns.into_iter().map(move |j| (i.min(j), i.max(j))))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut edges: Vec<Edge> = pairs
        .into_iter()
        .map(|(a, b)| Edge {
            a,
            b,
            weight: edge_weight(grid, a, b),
        })
        .collect();
    edges.sort_by(|x, y| {
        x.weight
            .total_cmp(&y.weight)
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });
    edges
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, weight: f64) {
        let (big, small) = if self.size[a] > self.size[b] || (self.size[a] == self.size[b] && a < b) {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = weight;
    }
}

/// Runs the merge procedure over pre-sorted edges on `m` nodes and returns
/// the component label (root) of every node.
pub fn merge_components(m: usize, edges: &[Edge], threshold: f64) -> Vec<usize> {
    let mut ds = DisjointSet::new(m);
    for e in edges {
        let (ra, rb) = (ds.find(e.a), ds.find(e.b));
        if ra == rb {
            continue;
        }
        let ta = ds.internal[ra] + threshold / ds.size[ra] as f64;
        let tb = ds.internal[rb] + threshold / ds.size[rb] as f64;
        if e.weight <= ta.min(tb) {
            ds.union(ra, rb, e.weight);
        }
    }
    (0..m).map(|i| ds.find(i)).collect()
}

pub fn segment_superpoints(grid: &VoxelGrid, k: usize, threshold: f64) -> Result<SuperpointPartition> {
    if grid.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if k == 0 {
        return Err(Error::invalid("segment_superpoints", "neighbor count must be at least 1"));
    }
    if threshold.is_nan() {
        return Err(Error::invalid("segment_superpoints", "threshold is NaN"));
    }
    let edges = knn_edges(grid, k);
    let labels = merge_components(grid.len(), &edges, threshold);
    Ok(SuperpointPartition::from_labels(&labels))
}
