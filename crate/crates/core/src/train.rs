//! Training loop: deterministic scene schedule, AdamW updates, key=value
//! step logs, periodic validation and atomic checkpoints.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::infer::evaluate_model;
use crate::model::{load_params, param_arrays, Model, PreparedScene};
use crate::pointcloud::PointCloud;
use crate::synth::augment;
use crate::tensor::{adamw_step, Checkpoint, OptimizerState, ParamStore, Tape, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.toml";
const MOMENT1_PREFIX: &str = "adam.m/";
const MOMENT2_PREFIX: &str = "adam.v/";

/// Loss terms of one optimizer step, averaged over its scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Optimizer steps completed, this one included.
    pub step: u64,
    pub lr: f64,
    pub head_lr: f64,
    pub total: f64,
    pub semantic: f64,
    pub geometric: Option<f64>,
    pub layers: Vec<LayerRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub cls: f64,
    /// `None` when no scene of the step had a matched pair.
    pub bce: Option<f64>,
    pub dice: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |v| format!("{v:e}"))
}

impl StepRecord {
    /// One log line of space-separated `key=value` pairs.
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "step={} lr={:e} head_lr={:e} total={:e} sem={:e} geo={}",
            self.step,
            self.lr,
            self.head_lr,
            self.total,
            self.semantic,
            fmt_opt(self.geometric)
        );
        for (l, layer) in self.layers.iter().enumerate() {
            let _ = write!(
                s,
                " l{l}.cls={:e} l{l}.bce={} l{l}.dice={}",
                layer.cls,
                fmt_opt(layer.bce),
                fmt_opt(layer.dice)
            );
        }
        s
    }
}

/// Running mean of an optional term, `None` if it never appeared.
#[derive(Clone, Copy, Default)]
struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.count += 1;
        }
    }

    fn get(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Voxelizes and over-segments a cloud with the run's settings.
pub fn prepare(cloud: PointCloud, config: &RunConfig) -> Result<PreparedScene> {
    PreparedScene::new(cloud, config.dataset.voxel_size, &config.model)
}

pub fn prepare_all(clouds: Vec<PointCloud>, config: &RunConfig) -> Result<Vec<PreparedScene>> {
    clouds.into_iter().map(|c| prepare(c, config)).collect()
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 31;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 29)
}

/// Scene visited by draw `g`: each epoch is a seeded permutation.
pub fn scene_for_draw(seed: u64, num_scenes: usize, g: u64) -> usize {
    let n = num_scenes as u64;
    let epoch = g / n;
    let mut order: Vec<usize> = (0..num_scenes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch)));
    order[(g % n) as usize]
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optim: OptimizerState,
    clouds: Vec<PointCloud>,
    /// Prepared scenes, reused when augmentation is off.
    cache: Vec<Option<PreparedScene>>,
}

impl Trainer {
    pub fn new(config: RunConfig, clouds: Vec<PointCloud>) -> Result<Self> {
        config.validate()?;
        if clouds.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        for c in &clouds {
            if c.num_classes != config.num_classes() {
                return Err(Error::Dataset(format!(
                    "scene has {} classes, config says {}",
                    c.num_classes,
                    config.num_classes()
                )));
            }
            if !c.has_labels() {
                return Err(Error::Dataset("training scene without labels".into()));
            }
        }
        let (model, store) = Model::new(&config.model, config.num_classes(), config.seed)?;
        let optim = OptimizerState::new(&store, config.optim.adamw(config.train.steps));
        let cache = (0..clouds.len()).map(|_| None).collect();
        Ok(Self {
            config,
            model,
            store,
            optim,
            clouds,
            cache,
        })
    }

    /// Restores parameters, moments and step count from a checkpoint
    /// written by [`Trainer::checkpoint`].
    pub fn resume(config: RunConfig, clouds: Vec<PointCloud>, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, clouds)?;
        if ckpt.config_hash != t.config.model_hash() {
            return Err(Error::Checkpoint("checkpoint was written for a different model config".into()));
        }
        load_params(&mut t.store, ckpt)?;
        for (prefix, buffers) in [(MOMENT1_PREFIX, &mut t.optim.first), (MOMENT2_PREFIX, &mut t.optim.second)] {
            for (id, name, _) in t.store.iter() {
                let key = format!("{prefix}{name}");
                let m = ckpt.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                if m.shape() != buffers[id.index()].shape() {
                    return Err(Error::Checkpoint(format!("{key} has shape {:?}", m.shape())));
                }
                buffers[id.index()] = m.clone();
            }
        }
        t.optim.step = ckpt.step;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn num_scenes(&self) -> usize {
        self.clouds.len()
    }

    fn scene(&mut self, index: usize, aug_seed: u64) -> Result<PreparedScene> {
        if self.config.train.augment {
            let cloud = augment(&self.clouds[index], &self.config.augment, aug_seed);
            return prepare(cloud, &self.config);
        }
        if self.cache[index].is_none() {
            self.cache[index] = Some(prepare(self.clouds[index].clone(), &self.config)?);
        }
        Ok(self.cache[index].clone().expect("just filled"))
    }

    /// One optimizer update on the scenes scheduled for the current step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let per = self.config.train.scenes_per_step;
        let step = self.optim.step;
        let n = self.store.len();
        let mut sum: Vec<Option<Tensor>> = vec![None; n];
        let layers = self.model.config.layers + 1;
        let (mut total, mut sem, mut geo) = (Mean::default(), Mean::default(), Mean::default());
        let mut cls = vec![Mean::default(); layers];
        let mut bce = vec![Mean::default(); layers];
        let mut dice = vec![Mean::default(); layers];
        for b in 0..per {
            let g = step * per as u64 + b as u64;
            let index = scene_for_draw(self.config.seed, self.clouds.len(), g);
            let scene = self.scene(index, mix(self.config.seed ^ 0xa076_1d64_78bd_642f, g))?;
            let mut tape = Tape::new();
            let (_, loss) = self.model.loss(&mut tape, &self.store, &scene, &self.config.loss)?;
            let value = |v| tape.value(v).data()[0];
            total.push(Some(value(loss.total)));
            sem.push(Some(value(loss.semantic)));
            geo.push(loss.geometric.map(value));
            for (l, layer) in loss.layers.iter().enumerate() {
                cls[l].push(Some(value(layer.cls)));
                bce[l].push(layer.bce.map(value));
                dice[l].push(layer.dice.map(value));
            }
            let grads = tape.backward(loss.total)?.for_params(&self.store);
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let scale = 1.0 / per as f64;
        for g in sum.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let lr = self.optim.lr(crate::tensor::ParamGroup::Base);
        let head_lr = self.optim.lr(crate::tensor::ParamGroup::VoxelHead);
        adamw_step(&mut self.store, &mut self.optim, &sum)?;
        Ok(StepRecord {
            step: self.optim.step,
            lr,
            head_lr,
            total: total.get().expect("at least one scene"),
            semantic: sem.get().expect("at least one scene"),
            geometric: geo.get(),
            layers: (0..layers)
                .map(|l| LayerRecord {
                    cls: cls[l].get().expect("every layer has a class loss"),
                    bce: bce[l].get(),
                    dice: dice[l].get(),
                })
                .collect(),
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut arrays = param_arrays(&self.store);
        for (prefix, buffers) in [(MOMENT1_PREFIX, &self.optim.first), (MOMENT2_PREFIX, &self.optim.second)] {
            for (id, name, _) in self.store.iter() {
                arrays.push((format!("{prefix}{name}"), buffers[id.index()].clone()));
            }
        }
        Ok(Checkpoint {
            config_hash: self.config.model_hash(),
            step: self.optim.step,
            metadata: self.config.to_toml()?,
            arrays,
        })
    }

    pub fn evaluate(&self, scenes: &[PreparedScene]) -> Result<EvalReport> {
        evaluate_model(&self.model, &self.store, scenes, &self.config.infer)
    }

    /// Header lines for the training log.
    pub fn header(&self) -> String {
        let c = &self.config;
        format!(
            "# config_hash={:016x} seed={} steps={} scenes={} scenes_per_step={}\n\
             # lambda_cls={} lambda_bce={} lambda_dice={} lambda_aux={}\n\
             # lr={} head_lr={} weight_decay={} poly_power={}\n",
            c.model_hash(),
            c.seed,
            c.train.steps,
            self.clouds.len(),
            c.train.scenes_per_step,
            c.loss.cls,
            c.loss.bce,
            c.loss.dice,
            c.loss.aux,
            c.optim.lr,
            c.optim.head_lr,
            c.optim.weight_decay,
            c.optim.poly_power,
        )
    }

    /// Trains up to `config.train.steps`, logging to `out/train.log` and
    /// checkpointing to `out/checkpoint.ckpt`. Returns the step records of
    /// this call and the last validation report, if any.
    pub fn run(&mut self, out: &Path, val: &[PreparedScene]) -> Result<RunSummary> {
        fs::create_dir_all(out)?;
        fs::write(out.join(CONFIG_FILE), self.config.to_toml()?)?;
        let mut log = OpenOptions::new().create(true).append(true).open(out.join(LOG_FILE))?;
        if self.step() == 0 {
            log.write_all(self.header().as_bytes())?;
        } else {
            writeln!(log, "# resumed step={}", self.step())?;
        }
        let ckpt_path = out.join(CHECKPOINT_FILE);
        let t = self.config.train.clone();
        let mut records = Vec::new();
        let mut report = None;
        while self.step() < t.steps {
            let rec = self.train_step()?;
            let s = rec.step;
            writeln!(log, "{}", rec.log_line())?;
            if t.log_every > 0 && (s % t.log_every == 0 || s == 1) {
                log::info!("{}", rec.log_line());
            }
            records.push(rec);
            let last = s == t.steps;
            if !val.is_empty() && ((t.eval_every > 0 && s % t.eval_every == 0) || last) {
                let r = self.evaluate(val)?;
                let line = format!("eval step={s} mAP={:e} AP50={:e} AP25={:e}", r.map, r.ap50, r.ap25);
                log::info!("{line}");
                writeln!(log, "{line}")?;
                report = Some(r);
            }
            if last || (t.checkpoint_every > 0 && s % t.checkpoint_every == 0) {
                self.checkpoint()?.save(&ckpt_path)?;
            }
        }
        if records.is_empty() {
            self.checkpoint()?.save(&ckpt_path)?;
        }
        log.flush()?;
        Ok(RunSummary {
            records,
            report,
            checkpoint: ckpt_path,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<StepRecord>,
    pub report: Option<EvalReport>,
    pub checkpoint: PathBuf,
}

/// Rebuilds the model from a checkpoint, checking it against `config`.
pub fn load_model(config: &RunConfig, ckpt: &Checkpoint) -> Result<(Model, ParamStore)> {
    if ckpt.config_hash != config.model_hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint hash {:016x} does not match config hash {:016x}",
            ckpt.config_hash,
            config.model_hash()
        )));
    }
    let (model, mut store) = Model::new(&config.model, config.num_classes(), config.seed)?;
    load_params(&mut store, ckpt)?;
    Ok((model, store))
}

/// The run configuration stored in a checkpoint's metadata.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    RunConfig::from_toml(&ckpt.metadata)
}
