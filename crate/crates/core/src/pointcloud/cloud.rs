use crate::error::{Error, Result};

/// Scene points with optional ground truth.
///
/// Semantic labels are zero-based: `0..num_classes` are object classes and
/// `num_classes` itself is the background class. Instance id 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub num_classes: usize,
    pub semantic: Option<Vec<usize>>,
    pub instance: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>, colors: Vec<[f64; 3]>, num_classes: usize) -> Result<Self> {
        let pc = Self {
            coords,
            colors,
            num_classes,
            semantic: None,
            instance: None,
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn with_labels(mut self, semantic: Vec<usize>, instance: Vec<u32>) -> Result<Self> {
        self.semantic = Some(semantic);
        self.instance = Some(instance);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn background_label(&self) -> usize {
        self.num_classes
    }

    pub fn has_labels(&self) -> bool {
        self.semantic.is_some() && self.instance.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        let bad = |msg: String| Err(Error::invalid("point cloud", msg));
        if self.colors.len() != n {
            return bad(format!("{} colors for {n} points", self.colors.len()));
        }
        if let Some(i) = self.coords.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return bad(format!("point {i} has a non-finite coordinate"));
        }
        if let Some(i) = self
            .colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return bad(format!("point {i} has a color outside [0, 1]"));
        }
        if let Some(sem) = &self.semantic {
            if sem.len() != n {
                return bad(format!("{} semantic labels for {n} points", sem.len()));
            }
            if let Some(&l) = sem.iter().find(|&&l| l > self.num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: self.num_classes + 1,
                });
            }
        }
        if let Some(inst) = &self.instance {
            if inst.len() != n {
                return bad(format!("{} instance ids for {n} points", inst.len()));
            }
        }
        if let (Some(sem), Some(inst)) = (&self.semantic, &self.instance) {
            let mut class_of = std::collections::HashMap::new();
            for (&s, &id) in sem.iter().zip(inst) {
                if id == 0 {
                    continue;
                }
                if s == self.num_classes {
                    return bad(format!("instance {id} carries the background label"));
                }
                if *class_of.entry(id).or_insert(s) != s {
                    return bad(format!("instance {id} has more than one semantic label"));
                }
            }
        }
        Ok(())
    }

    /// Instance ids present in the cloud, ascending, background excluded.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .instance
            .iter()
            .flatten()
            .copied()
            .filter(|&i| i != 0)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        bounds(&self.coords)
    }
}

pub fn bounds(coords: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in coords {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    (lo, hi)
}
