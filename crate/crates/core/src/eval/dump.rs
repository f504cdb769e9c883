//! Prediction dump: the JSON document written by inference and read back
//! for evaluation.
//!
//! ```text
//! {
//!   "format": "sgiformer-predictions",
//!   "version": 1,
//!   "scene": "<name>",
//!   "num_points": n, "num_superpoints": n_s, "num_classes": c,
//!   "layers": [                        // one entry per decoder prediction
//!     { "layer": l,
//!       "queries": [
//!         { "query": i, "source": "scene" | "learnable",
//!           "class": k,                // argmax over object classes
//!           "class_score": p,          // its probability
//!           "background_score": p_bg,
//!           "superpoints": [..],       // binary mask as sorted indices
//!           "points": [..] } ] } ],
//!   "instances": [                     // post-processed final predictions
//!     { "query": i, "class": k, "score": s, "points": [..] } ]
//! }
//! ```
//!
//! Masks are stored as ascending index lists into the scene's points or
//! superpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ScoredInstance;
use crate::error::{Error, Result};

pub const DUMP_FORMAT: &str = "sgiformer-predictions";
pub const DUMP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionDump {
    pub format: String,
    pub version: u32,
    pub scene: String,
    pub num_points: usize,
    pub num_superpoints: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerDump>,
    pub instances: Vec<InstanceDump>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDump {
    pub layer: usize,
    pub queries: Vec<QueryDump>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryDump {
    pub query: usize,
    pub source: String,
    pub class: usize,
    pub class_score: f64,
    pub background_score: f64,
    pub superpoints: Vec<usize>,
    pub points: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDump {
    pub query: usize,
    pub class: usize,
    pub score: f64,
    pub points: Vec<usize>,
}

pub fn mask_to_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

pub fn indices_to_mask(idx: &[usize], n: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(Error::invalid("prediction dump", format!("index {i} out of {n}")));
        }
        mask[i] = true;
    }
    Ok(mask)
}

impl PredictionDump {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dump: Self = serde_json::from_str(text)?;
        if dump.format != DUMP_FORMAT || dump.version != DUMP_VERSION {
            return Err(Error::invalid(
                "prediction dump",
                format!("unsupported format {} version {}", dump.format, dump.version),
            ));
        }
        Ok(dump)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Post-processed instances as evaluation input.
    pub fn scored_instances(&self) -> Result<Vec<ScoredInstance>> {
        self.instances
            .iter()
            .map(|inst| {
                if inst.class >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: inst.class,
                        classes: self.num_classes,
                    });
                }
                Ok(ScoredInstance {
                    mask: indices_to_mask(&inst.points, self.num_points)?,
                    class: inst.class,
                    score: inst.score,
                })
            })
            .collect()
    }
}
