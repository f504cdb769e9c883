use super::*;
use crate::pointcloud::voxelize;
use proptest::prelude::*;

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn zero_instances_is_background_only() {
    let spec = SceneSpec { instances: (0, 0), ..SceneSpec::default() };
    let scene = generate_scene(&spec).unwrap();
    assert!(scene.instances.is_empty());
    assert!(!scene.cloud.is_empty());
    assert!(scene.cloud.instance.as_ref().unwrap().iter().all(|&i| i == 0));
    assert!(scene.cloud.semantic.as_ref().unwrap().iter().all(|&s| s == spec.num_classes));
}

#[test]
fn same_seed_same_cloud() {
    let spec = SceneSpec { seed: 42, ..SceneSpec::default() };
    let a = generate_scene(&spec).unwrap();
    let b = generate_scene(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate_scene(&spec.with_seed(43)).unwrap();
    assert_ne!(a.cloud.coords, c.cloud.coords);
}

#[test]
fn three_instances_have_distinct_ids_and_one_class_each() {
    for seed in 0..10 {
        let spec = SceneSpec { seed, instances: (3, 3), ..SceneSpec::default() };
        let scene = generate_scene(&spec).unwrap();
        let pc = &scene.cloud;
        assert_eq!(pc.instance_ids(), vec![1, 2, 3], "seed {seed}");
        let sem = pc.semantic.as_ref().unwrap();
        let inst = pc.instance.as_ref().unwrap();
        for placed in &scene.instances {
            let classes: std::collections::BTreeSet<usize> = inst
                .iter()
                .zip(sem)
                .filter(|(&i, _)| i == placed.id)
                .map(|(_, &s)| s)
                .collect();
            assert_eq!(classes.into_iter().collect::<Vec<_>>(), vec![placed.class]);
            assert_eq!(inst.iter().filter(|&&i| i == placed.id).count(), placed.points);
            assert_eq!(placed.archetype, spec.archetype(placed.class));
        }
    }
}

#[test]
fn centroids_match_intended_centers() {
    // Per axis: |mean - center| <= 3 s / sqrt(k), with s the sample spread.
    // Expect about 0.3 % misses under symmetric sampling; allow 2 %.
    let (mut checks, mut misses) = (0, 0);
    for seed in 0..20 {
        let scene = generate_scene(&SceneSpec { seed, ..SceneSpec::default() }).unwrap();
        let inst = scene.cloud.instance.as_ref().unwrap();
        for placed in &scene.instances {
            let pts: Vec<[f64; 3]> = scene
                .cloud
                .coords
                .iter()
                .zip(inst)
                .filter(|(_, &i)| i == placed.id)
                .map(|(p, _)| *p)
                .collect();
            let k = pts.len() as f64;
            for axis in 0..3 {
                let mean = pts.iter().map(|p| p[axis]).sum::<f64>() / k;
                let var = pts.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / (k - 1.0);
                let bound = 3.0 * var.sqrt() / k.sqrt() + 1e-12;
                checks += 1;
                if (mean - placed.center[axis]).abs() > bound {
                    misses += 1;
                }
            }
        }
    }
    assert!(checks > 100);
    assert!(misses as f64 <= 0.02 * checks as f64, "{misses} of {checks}");
}

#[test]
fn default_scenes_are_desk_sized_and_separated() {
    let spec = SceneSpec::default();
    let mut pairs = 0;
    for seed in 0..20 {
        let scene = generate_scene(&spec.with_seed(seed)).unwrap();
        let pc = &scene.cloud;
        assert!((2_000..=10_000).contains(&pc.len()), "seed {seed}: {} points", pc.len());
        let grid = voxelize(pc, 0.02).unwrap();
        assert!((1_000..=4_000).contains(&grid.len()), "seed {seed}: {} voxels", grid.len());
        assert!(scene.instances.len() >= 4, "{:?}", scene.warnings);

        // Different objects, and objects and floor, stay a gap apart.
        let inst = pc.instance.as_ref().unwrap();
        let limit = spec.gap - 8.0 * spec.noise;
        for i in 0..pc.len() {
            if inst[i] == 0 {
                continue;
            }
            assert!(pc.coords[i][2] > limit, "seed {seed}: object point near the floor");
            for j in 0..i {
                if inst[j] != 0 && inst[j] != inst[i] {
                    assert!(dist(pc.coords[i], pc.coords[j]) > limit);
                }
            }
        }
        for (a, b) in scene.instances.iter().zip(scene.instances.iter().skip(1)) {
            let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
            if a.class == b.class && d < 0.3 {
                pairs += 1;
            }
        }
    }
    assert!(pairs >= 3, "only {pairs} near same-class pairs");
}

#[test]
fn crowded_room_places_fewer_with_warning() {
    let spec = SceneSpec {
        room_extent: Span::new(0.3, 0.3),
        instances: (12, 12),
        placement_retries: 8,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec).unwrap();
    assert!(scene.instances.len() < 12);
    assert_eq!(scene.warnings.len(), 1);
    assert_eq!(scene.cloud.instance_ids().len(), scene.instances.len());
}

#[test]
fn invalid_specs_rejected() {
    let base = SceneSpec::default();
    for bad in [
        SceneSpec { num_classes: 1, ..base.clone() },
        SceneSpec { room_extent: Span::new(0.0, 1.0), ..base.clone() },
        SceneSpec { instances: (4, 2), ..base.clone() },
        SceneSpec { archetypes: vec![], ..base.clone() },
        SceneSpec { noise: -1.0, ..base.clone() },
    ] {
        assert!(generate_scene(&bad).is_err());
    }
    let cfg = AugmentConfig { scale_range: Span::new(0.0, 1.0), ..AugmentConfig::default() };
    assert!(cfg.validate().is_err());
}

#[test]
fn augment_off_is_identity() {
    let pc = generate_scene(&SceneSpec::default()).unwrap().cloud;
    assert_eq!(augment(&pc, &AugmentConfig::off(), 7), pc);
}

#[test]
fn quarter_turn_by_hand() {
    let p = rotate_z([1.0, 0.0, 0.0], std::f64::consts::FRAC_PI_2);
    assert!(dist(p, [0.0, 1.0, 0.0]) < 1e-15);
}

#[test]
fn rotation_preserves_distances() {
    let pc = generate_scene(&SceneSpec { seed: 3, ..SceneSpec::default() }).unwrap().cloud;
    let cfg = AugmentConfig { rotate: true, ..AugmentConfig::off() };
    let out = augment(&pc, &cfg, 11);
    assert_ne!(out.coords, pc.coords);
    for i in (0..pc.len()).step_by(97) {
        for j in (0..pc.len()).step_by(89) {
            let before = dist(pc.coords[i], pc.coords[j]);
            let after = dist(out.coords[i], out.coords[j]);
            assert!((before - after).abs() < 1e-9);
        }
    }
    assert_eq!(out.colors, pc.colors);
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        train_scenes: 3,
        val_scenes: 2,
        ..DatasetConfig::default()
    };
    let m = generate_dataset(dir.path(), &cfg, 9).unwrap();
    assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    assert_eq!(m.class_names, vec!["box0", "cylinder0", "sphere0", "plane0"]);
    let train = m.load(dir.path(), Split::Train).unwrap();
    let val = m.load(dir.path(), Split::Val).unwrap();
    assert_eq!((train.len(), val.len()), (3, 2));
    for (i, pc) in train.iter().enumerate() {
        let want = generate_scene(&cfg.scene.with_seed(scene_seed(9, false, i))).unwrap().cloud;
        assert_eq!(pc, &want);
    }
    assert_ne!(train[0].coords, val[0].coords);
    // Same seed, same bytes.
    let again = tempfile::tempdir().unwrap();
    generate_dataset(again.path(), &cfg, 9).unwrap();
    for name in m.train.iter().chain(&m.val).chain([&MANIFEST_FILE.to_string()]) {
        let a = std::fs::read(dir.path().join(name)).unwrap();
        let b = std::fs::read(again.path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn missing_manifest_is_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Manifest::read(dir.path()), Err(Error::Dataset(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn augment_keeps_labels_and_count(seed in 0u64..1000, aug in any::<u64>()) {
        let spec = SceneSpec { seed, instances: (1, 3), points_per_instance: (20, 40), background_density: 200.0, ..SceneSpec::default() };
        let pc = generate_scene(&spec).unwrap().cloud;
        let out = augment(&pc, &AugmentConfig::default(), aug);
        prop_assert_eq!(out.len(), pc.len());
        prop_assert_eq!(&out.semantic, &pc.semantic);
        prop_assert_eq!(&out.instance, &pc.instance);
        prop_assert_eq!(&out.colors, &pc.colors);
        prop_assert_eq!(augment(&pc, &AugmentConfig::default(), aug), out);
    }
}
