//! Procedural desk-scale scenes: a floor, a back wall and a handful of
//! labeled objects sampled from simple surface archetypes.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{read_scene, write_scene, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Box,
    Cylinder,
    Sphere,
    /// A raised horizontal panel.
    Plane,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [Archetype::Box, Archetype::Cylinder, Archetype::Sphere, Archetype::Plane];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Box => "box",
            Archetype::Cylinder => "cylinder",
            Archetype::Sphere => "sphere",
            Archetype::Plane => "plane",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub min: f64,
    pub max: f64,
}

impl Span {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..self.max)
        } else {
            self.min
        }
    }

    fn valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_classes: usize,
    /// Archetype of each class; class `k` uses entry `k % len`.
    pub archetypes: Vec<Archetype>,
    /// Floor width and depth in meters.
    pub room_extent: Span,
    pub wall_height: f64,
    pub instances: (usize, usize),
    pub points_per_instance: (usize, usize),
    /// Background points per square meter.
    pub background_density: f64,
    /// Coordinate noise standard deviation in meters.
    pub noise: f64,
    /// Object scale relative to the archetype's base size.
    pub object_scale: Span,
    /// Minimum free space between objects and above the floor, meters.
    pub gap: f64,
    /// Chance that an object gets a same-class neighbor placed right next to it.
    pub pair_probability: f64,
    pub placement_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 4,
            archetypes: Archetype::ALL.to_vec(),
            room_extent: Span::new(0.8, 1.0),
            wall_height: 0.25,
            instances: (4, 7),
            points_per_instance: (200, 320),
            background_density: 1500.0,
            noise: 0.002,
            object_scale: Span::new(0.8, 1.2),
            gap: 0.06,
            pair_probability: 0.3,
            placement_retries: 64,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("scene spec: {msg}")));
        if self.num_classes < 2 {
            return bad("at least two classes are required");
        }
        if self.archetypes.is_empty() {
            return bad("archetypes must not be empty");
        }
        if !self.room_extent.valid() || self.room_extent.min <= 0.0 {
            return bad("room extent must be a positive range");
        }
        if !self.object_scale.valid() || self.object_scale.min <= 0.0 {
            return bad("object scale must be a positive range");
        }
        if self.instances.0 > self.instances.1 || self.points_per_instance.0 > self.points_per_instance.1 {
            return bad("ranges must satisfy min <= max");
        }
        if self.points_per_instance.0 == 0 {
            return bad("instances need at least one point");
        }
        if !(self.wall_height >= 0.0 && self.background_density >= 0.0 && self.noise >= 0.0 && self.gap >= 0.0) {
            return bad("wall height, density, noise and gap must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.pair_probability) {
            return bad("pair probability must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn archetype(&self, class: usize) -> Archetype {
        self.archetypes[class % self.archetypes.len()]
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Object as placed by the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedInstance {
    pub id: u32,
    pub class: usize,
    pub archetype: Archetype,
    /// Center of the sampled surface.
    pub center: [f64; 3],
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub instances: Vec<PlacedInstance>,
    pub warnings: Vec<String>,
}

/// Half extents of an archetype at unit scale: (footprint radius, half height).
fn base_size(a: Archetype) -> (f64, f64) {
    match a {
        Archetype::Box => (0.07, 0.06),
        Archetype::Cylinder => (0.05, 0.09),
        Archetype::Sphere => (0.065, 0.065),
        Archetype::Plane => (0.11, 0.0),
    }
}

#[derive(Clone)]
struct Shape {
    archetype: Archetype,
    center: [f64; 3],
    /// Box half sizes, or (radius, radius, half height) for round shapes.
    half: [f64; 3],
    /// Rotation about z.
    yaw: f64,
}

impl Shape {
    fn footprint(&self) -> f64 {
        match self.archetype {
            Archetype::Box | Archetype::Plane => self.half[0].hypot(self.half[1]),
            Archetype::Cylinder | Archetype::Sphere => self.half[0],
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        let [hx, hy, hz] = self.half;
        let local = match self.archetype {
            Archetype::Box => {
                let areas = [hy * hz, hx * hz, hx * hy];
                let total: f64 = areas.iter().sum();
                let mut u = rng.gen_range(0.0..total);
                let axis = areas.iter().position(|&a| {
                    u -= a;
                    u < 0.0
                });
                let axis = axis.unwrap_or(2);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut p = [rng.gen_range(-hx..=hx), rng.gen_range(-hy..=hy), rng.gen_range(-hz..=hz)];
                p[axis] = sign * self.half[axis];
                p
            }
            Archetype::Cylinder => {
                let side = TAU * hx * 2.0 * hz;
                let caps = 2.0 * PI * hx * hx;
                let theta = rng.gen_range(0.0..TAU);
                if rng.gen_range(0.0..side + caps) < side {
                    [hx * theta.cos(), hx * theta.sin(), rng.gen_range(-hz..=hz)]
                } else {
                    let r = hx * rng.gen::<f64>().sqrt();
                    let z = if rng.gen_bool(0.5) { hz } else { -hz };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
            Archetype::Sphere => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm > 1e-12 {
                    break [hx * v[0] / norm, hx * v[1] / norm, hx * v[2] / norm];
                }
            },
            Archetype::Plane => [rng.gen_range(-hx..=hx), rng.gen_range(-hy..=hy), 0.0],
        };
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * local[0] - s * local[1],
            self.center[1] + s * local[0] + c * local[1],
            self.center[2] + local[2],
        ]
    }
}

fn class_color(class: usize, classes: usize) -> [f64; 3] {
    hsv(class as f64 / classes as f64, 0.7, 0.85)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn jitter(rng: &mut impl Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn random_shape(spec: &SceneSpec, class: usize, rng: &mut impl Rng) -> Shape {
    let archetype = spec.archetype(class);
    let scale = spec.object_scale.sample(rng);
    let (r, h) = base_size(archetype);
    let half = match archetype {
        Archetype::Box => [r * scale * rng.gen_range(0.7..1.0), r * scale * rng.gen_range(0.7..1.0), h * scale],
        Archetype::Plane => [r * scale, 0.65 * r * scale, 0.0],
        _ => [r * scale, r * scale, h * scale],
    };
    // Objects hover one gap above the floor; panels sit at table height.
    let lift = match archetype {
        Archetype::Plane => spec.gap + 0.08 * scale,
        _ => spec.gap + half[2],
    };
    Shape {
        archetype,
        center: [0.0, 0.0, lift],
        half,
        yaw: rng.gen_range(0.0..PI),
    }
}

fn fits<'a>(shape: &Shape, mut placed: impl Iterator<Item = &'a Shape>, room: [f64; 2], gap: f64) -> bool {
    let f = shape.footprint();
    let [x, y, _] = shape.center;
    // Keep clear of the back wall and inside the floor.
    if x - f < 0.0 || x + f > room[0] || y - f < 0.0 || y + f > room[1] - gap {
        return false;
    }
    placed.all(|o| {
        let d = (x - o.center[0]).hypot(y - o.center[1]);
        d >= f + o.footprint() + gap
    })
}

/// Generates one labeled scene. Deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let room = [spec.room_extent.sample(&mut rng), spec.room_extent.sample(&mut rng)];
    let target = rng.gen_range(spec.instances.0..=spec.instances.1);
    let mut warnings = Vec::new();

    let mut shapes: Vec<(usize, Shape)> = Vec::new();
    // Whether the latest object may still receive a same-class partner.
    let mut pairable = false;
    while shapes.len() < target {
        let pair_with = match shapes.last() {
            Some((class, prev)) if pairable && rng.gen_bool(spec.pair_probability) => {
                Some((*class, prev.center, prev.footprint()))
            }
            _ => None,
        };
        let class = pair_with.map_or_else(|| rng.gen_range(0..spec.num_classes), |p| p.0);
        let mut placed = None;
        for _ in 0..spec.placement_retries {
            let mut shape = random_shape(spec, class, &mut rng);
            let f = shape.footprint();
            let (x, y) = match pair_with {
                Some((_, c, pf)) => {
                    // Just beyond the minimum gap from the previous object.
                    let d = pf + f + spec.gap * rng.gen_range(1.0..1.3);
                    let a = rng.gen_range(0.0..TAU);
                    (c[0] + d * a.cos(), c[1] + d * a.sin())
                }
                None => {
                    let (xmax, ymax) = (room[0] - f, room[1] - spec.gap - f);
                    if xmax <= f || ymax <= f {
                        continue;
                    }
                    (rng.gen_range(f..xmax), rng.gen_range(f..ymax))
                }
            };
            shape.center[0] = x;
            shape.center[1] = y;
            if fits(&shape, shapes.iter().map(|(_, s)| s), room, spec.gap) {
                placed = Some(shape);
                break;
            }
        }
        match placed {
            Some(shape) => {
                shapes.push((class, shape));
                pairable = pair_with.is_none();
            }
            None if pair_with.is_some() => pairable = false,
            None => {
                let msg = format!(
                    "seed {}: placed {} of {} instances after {} retries",
                    spec.seed,
                    shapes.len(),
                    target,
                    spec.placement_retries
                );
                log::warn!("{msg}");
                warnings.push(msg);
                break;
            }
        }
    }

    let mut coords = Vec::new();
    let mut colors = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut push = |p: [f64; 3], color: [f64; 3], class: usize, id: u32, rng: &mut ChaCha8Rng| {
        coords.push(p.map(|v| v + noise.sample(rng)));
        colors.push(color);
        semantic.push(class);
        instance.push(id);
    };

    let floor_color = [0.55, 0.5, 0.45];
    let wall_color = [0.8, 0.8, 0.78];
    let floor_points = (spec.background_density * room[0] * room[1]).round() as usize;
    for _ in 0..floor_points {
        let p = [rng.gen_range(0.0..room[0]), rng.gen_range(0.0..room[1]), 0.0];
        let c = jitter(&mut rng, floor_color, 0.03);
        push(p, c, spec.num_classes, 0, &mut rng);
    }
    let wall_points = (spec.background_density * room[0] * spec.wall_height).round() as usize;
    for _ in 0..wall_points {
        let p = [rng.gen_range(0.0..room[0]), room[1], rng.gen_range(0.0..spec.wall_height)];
        let c = jitter(&mut rng, wall_color, 0.03);
        push(p, c, spec.num_classes, 0, &mut rng);
    }

    let mut instances = Vec::new();
    for (k, (class, shape)) in shapes.iter().enumerate() {
        let id = k as u32 + 1;
        let base = jitter(&mut rng, class_color(*class, spec.num_classes), 0.08);
        let count = rng.gen_range(spec.points_per_instance.0..=spec.points_per_instance.1);
        for _ in 0..count {
            let p = shape.sample(&mut rng);
            let c = jitter(&mut rng, base, 0.03);
            push(p, c, *class, id, &mut rng);
        }
        instances.push(PlacedInstance {
            id,
            class: *class,
            archetype: shape.archetype,
            center: shape.center,
            points: count,
        });
    }

    let cloud = PointCloud::new(coords, colors, spec.num_classes)?.with_labels(semantic, instance)?;
    Ok(SyntheticScene { cloud, instances, warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Mirror x with probability one half.
    pub flip: bool,
    /// Uniform rotation about z.
    pub rotate: bool,
    /// Uniform shift per axis in `[-translate_range, translate_range]`.
    pub translate: bool,
    pub translate_range: f64,
    /// Isotropic scale.
    pub scale: bool,
    pub scale_range: Span,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            rotate: true,
            translate: true,
            translate_range: 0.1,
            scale: true,
            scale_range: Span::new(0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            flip: false,
            rotate: false,
            translate: false,
            scale: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale_range.valid() || self.scale_range.min <= 0.0 {
            return Err(Error::Config("augment: scale range must be positive".into()));
        }
        if !(self.translate_range >= 0.0) {
            return Err(Error::Config("augment: translate range must be non-negative".into()));
        }
        Ok(())
    }
}

/// Rotates about the z axis through the origin.
pub fn rotate_z(p: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Random scale, flip, z-rotation and translation of the coordinates.
/// Colors and labels are untouched.
pub fn augment(pc: &PointCloud, cfg: &AugmentConfig, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if cfg.scale { cfg.scale_range.sample(&mut rng) } else { 1.0 };
    let flip = cfg.flip && rng.gen_bool(0.5);
    let angle = if cfg.rotate { rng.gen_range(0.0..TAU) } else { 0.0 };
    let shift = if cfg.translate && cfg.translate_range > 0.0 {
        let t = cfg.translate_range;
        [rng.gen_range(-t..=t), rng.gen_range(-t..=t), rng.gen_range(-t..=t)]
    } else {
        [0.0; 3]
    };
    let mut out = pc.clone();
    if !(cfg.scale || cfg.flip || cfg.rotate || cfg.translate) {
        return out;
    }
    for p in &mut out.coords {
        let mut q = p.map(|v| v * scale);
        if flip {
            q[0] = -q[0];
        }
        let q = rotate_z(q, angle);
        *p = [q[0] + shift[0], q[1] + shift[1], q[2] + shift[2]];
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub voxel_size: f64,
    pub seed: u64,
    /// Scene file names relative to the manifest.
    pub train: Vec<String>,
    pub val: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub voxel_size: f64,
    pub scene: SceneSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_scenes: 50,
            val_scenes: 10,
            voxel_size: 0.02,
            scene: SceneSpec::default(),
        }
    }
}

/// Seed of scene `index` in a split; train and val never share seeds.
pub fn scene_seed(base: u64, val: bool, index: usize) -> u64 {
    let split: u64 = if val { 0x5eed_0000_0001 } else { 0x5eed_0000_0000 };
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ split.wrapping_add((index as u64) << 20)
}

pub fn class_names(spec: &SceneSpec) -> Vec<String> {
    (0..spec.num_classes)
        .map(|c| format!("{}{}", spec.archetype(c).name(), c / spec.archetypes.len()))
        .collect()
}

/// Writes the train and val scenes plus the manifest into `dir`.
/// Scenes are generated on worker threads; output does not depend on the
/// thread count.
pub fn generate_dataset(dir: &Path, cfg: &DatasetConfig, seed: u64) -> Result<Manifest> {
    cfg.scene.validate()?;
    if !(cfg.voxel_size > 0.0) {
        return Err(Error::InvalidVoxelSize(cfg.voxel_size));
    }
    std::fs::create_dir_all(dir)?;
    let jobs: Vec<(bool, usize)> = (0..cfg.train_scenes)
        .map(|i| (false, i))
        .chain((0..cfg.val_scenes).map(|i| (true, i)))
        .collect();
    let name = |val: bool, i: usize| format!("{}_{i:04}.scene", if val { "val" } else { "train" });
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                s.spawn(move || {
                    jobs.iter()
                        .skip(w)
                        .step_by(workers)
                        .map(|&(val, i)| {
                            let scene = generate_scene(&cfg.scene.with_seed(scene_seed(seed, val, i)))?;
                            write_scene(&dir.join(name(val, i)), &scene.cloud, cfg.voxel_size)
                        })
                        .collect::<Result<Vec<()>>>()
                        .map(|_| ())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Dataset("generator thread panicked".into()))))
            .collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    let manifest = Manifest {
        version: 1,
        num_classes: cfg.scene.num_classes,
        class_names: class_names(&cfg.scene),
        voxel_size: cfg.voxel_size,
        seed,
        train: (0..cfg.train_scenes).map(|i| name(false, i)).collect(),
        val: (0..cfg.val_scenes).map(|i| name(true, i)).collect(),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != 1 {
            return Err(Error::Dataset(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn paths(&self, dir: &Path, split: Split) -> Vec<PathBuf> {
        let names = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        };
        names.iter().map(|n| dir.join(n)).collect()
    }

    /// Loads every scene of a split, checking class counts against the manifest.
    pub fn load(&self, dir: &Path, split: Split) -> Result<Vec<PointCloud>> {
        self.paths(dir, split)
            .iter()
            .map(|p| {
                let scene = read_scene(p)?;
                if scene.cloud.num_classes != self.num_classes {
                    return Err(Error::Dataset(format!(
                        "{} has {} classes, manifest says {}",
                        p.display(),
                        scene.cloud.num_classes,
                        self.num_classes
                    )));
                }
                Ok(scene.cloud)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
