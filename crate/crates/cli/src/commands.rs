use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sgiformer::config::RunConfig;
use sgiformer::eval::dump::indices_to_mask;
use sgiformer::eval::PredictionDump;
use sgiformer::infer::{evaluate_model, infer_scene, instance_labels};
use sgiformer::model::tiny_gradient_check;
use sgiformer::pointcloud::{read_scene, write_ply, PointCloud};
use sgiformer::synth::{generate_dataset, Manifest, Split};
use sgiformer::tensor::gradcheck::Tolerance;
use sgiformer::tensor::Checkpoint;
use sgiformer::train::{checkpoint_config, load_model, prepare, prepare_all, Trainer, CHECKPOINT_FILE};

use crate::{Cli, Command, SplitArg};

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => gen_data(&cli),
        Command::Train { resume } => train(&cli, *resume),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => eval(&cli, checkpoint, data.as_deref(), *split),
        Command::Infer { checkpoint, scene, ply } => infer(&cli, checkpoint, scene, *ply),
        Command::ExportPly { scene, predictions } => export_ply(&cli, scene, predictions.as_deref()),
        Command::Gradcheck => gradcheck(&cli),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// The checkpoint's own configuration, or `--config` when given; the model
/// sections must agree either way.
fn checkpoint_run(cli: &Cli, path: &Path) -> Result<(RunConfig, Checkpoint)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let cfg = match &cli.config {
        Some(_) => load_config(cli)?,
        None => checkpoint_config(&ckpt).context("checkpoint metadata")?,
    };
    if ckpt.config_hash != cfg.model_hash() {
        bail!(
            "checkpoint {} was trained with a different model config (hash {:016x}, config {:016x})",
            path.display(),
            ckpt.config_hash,
            cfg.model_hash()
        );
    }
    Ok((cfg, ckpt))
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

fn open_dataset(dir: &Path, cfg: &RunConfig) -> Result<Manifest> {
    let manifest = Manifest::read(dir)?;
    if manifest.num_classes != cfg.num_classes() {
        bail!(
            "dataset {} has {} classes, config has {}",
            dir.display(),
            manifest.num_classes,
            cfg.num_classes()
        );
    }
    if manifest.voxel_size != cfg.dataset.voxel_size {
        log::warn!(
            "dataset voxel size {} differs from configured {}; using the configured one",
            manifest.voxel_size,
            cfg.dataset.voxel_size
        );
    }
    Ok(manifest)
}

fn gen_data(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
    let manifest = generate_dataset(&dir, &cfg.dataset, cfg.seed)?;
    log::info!(
        "wrote {} train and {} val scenes to {}",
        manifest.train.len(),
        manifest.val.len(),
        dir.display()
    );
    Ok(())
}

fn train(cli: &Cli, resume: bool) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli, &cfg);
    let manifest = open_dataset(&cfg.data_dir, &cfg)?;
    let train = manifest.load(&cfg.data_dir, Split::Train)?;
    let val = prepare_all(manifest.load(&cfg.data_dir, Split::Val)?, &cfg)?;
    log::info!("training on {} scenes, validating on {}", train.len(), val.len());
    let mut trainer = if resume {
        let path = out.join(CHECKPOINT_FILE);
        let ckpt = Checkpoint::load(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        log::info!("resuming at step {}", ckpt.step);
        Trainer::resume(cfg, train, &ckpt)?
    } else {
        Trainer::new(cfg, train)?
    };
    let summary = trainer.run(&out, &val)?;
    if let Some(report) = &summary.report {
        report.write(&out, "eval_val", &manifest.class_names)?;
        log::info!("val mAP={:.4} AP50={:.4} AP25={:.4}", report.map, report.ap50, report.ap25);
    }
    log::info!("checkpoint written to {}", summary.checkpoint.display());
    Ok(())
}

fn eval(cli: &Cli, checkpoint: &Path, data: Option<&Path>, split: SplitArg) -> Result<()> {
    let (cfg, ckpt) = checkpoint_run(cli, checkpoint)?;
    let dir = data.map_or_else(|| cfg.data_dir.clone(), Path::to_path_buf);
    let manifest = open_dataset(&dir, &cfg)?;
    let (split, name) = match split {
        SplitArg::Train => (Split::Train, "train"),
        SplitArg::Val => (Split::Val, "val"),
    };
    let clouds = manifest.load(&dir, split)?;
    if clouds.is_empty() {
        bail!("the {name} split of {} is empty", dir.display());
    }
    let scenes = prepare_all(clouds, &cfg)?;
    let (model, store) = load_model(&cfg, &ckpt)?;
    let report = evaluate_model(&model, &store, &scenes, &cfg.infer)?;
    let out = out_dir(cli, &cfg);
    let stem = format!("eval_{name}");
    report.write(&out, &stem, &manifest.class_names)?;
    print!("{}", report.table(&manifest.class_names));
    log::info!("report written to {}", out.join(format!("{stem}.txt")).display());
    Ok(())
}

fn scene_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scene".into(), |s| s.to_string_lossy().into_owned())
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    Ok(read_scene(path).with_context(|| format!("reading scene {}", path.display()))?.cloud)
}

fn infer(cli: &Cli, checkpoint: &Path, scene_path: &Path, ply: bool) -> Result<()> {
    let (cfg, ckpt) = checkpoint_run(cli, checkpoint)?;
    let cloud = read_cloud(scene_path)?;
    if cloud.num_classes != cfg.num_classes() {
        bail!("scene has {} classes, model has {}", cloud.num_classes, cfg.num_classes());
    }
    let (model, store) = load_model(&cfg, &ckpt)?;
    let stem = scene_stem(scene_path);
    let scene = prepare(cloud, &cfg)?;
    let result = infer_scene(&model, &store, &scene, &stem, &cfg.infer)?;
    let out = out_dir(cli, &cfg);
    std::fs::create_dir_all(&out)?;
    let dump_path = out.join(format!("{stem}.pred.json"));
    result.dump.write(&dump_path)?;
    log::info!("{} instances written to {}", result.instances.len(), dump_path.display());
    if ply {
        let labels = instance_labels(result.instances.iter().map(|i| i.points.as_slice()), scene.cloud.len())?;
        let ply_path = out.join(format!("{stem}.pred.ply"));
        write_ply(&ply_path, &scene.cloud.coords, &labels)?;
        log::info!("point cloud written to {}", ply_path.display());
    }
    Ok(())
}

fn export_ply(cli: &Cli, scene_path: &Path, predictions: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let cloud = read_cloud(scene_path)?;
    let labels = match predictions {
        Some(path) => {
            let dump = PredictionDump::read(path).with_context(|| format!("reading {}", path.display()))?;
            if dump.num_points != cloud.len() {
                bail!("dump covers {} points, scene has {}", dump.num_points, cloud.len());
            }
            let masks = dump
                .instances
                .iter()
                .map(|i| indices_to_mask(&i.points, cloud.len()))
                .collect::<sgiformer::Result<Vec<_>>>()?;
            instance_labels(masks.iter().map(Vec::as_slice), cloud.len())?
        }
        None => match &cloud.instance {
            Some(ids) => ids.clone(),
            None => bail!("{} has no instance labels; pass --predictions", scene_path.display()),
        },
    };
    let out = out_dir(cli, &cfg);
    std::fs::create_dir_all(&out)?;
    let path = out.join(format!("{}.ply", scene_stem(scene_path)));
    write_ply(&path, &cloud.coords, &labels)?;
    log::info!("point cloud written to {}", path.display());
    Ok(())
}

fn gradcheck(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let tol = Tolerance::default();
    let start = std::time::Instant::now();
    let report = tiny_gradient_check(cfg.seed, tol)?;
    println!(
        "checked={} mismatches={} max_abs_error={:e} seconds={:.2}",
        report.checked,
        report.mismatches.len(),
        report.max_abs_error,
        start.elapsed().as_secs_f64()
    );
    for m in report.mismatches.iter().take(20) {
        println!("mismatch {}[{}] analytic={:e} numeric={:e}", m.param, m.index, m.analytic, m.numeric);
    }
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}
