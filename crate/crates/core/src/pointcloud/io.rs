//! Scene text files and PLY export.
//!
//! A scene file is a short header followed by one record per point:
//!
//! ```text
//! sgiformer-scene 1
//! points 3
//! voxel_size 0.02
//! classes 4
//! labeled 1
//! end_header
//! 0.1 0.2 0.0 0.5 0.5 0.5 5 0
//! ...
//! ```
//!
//! Records are `x y z r g b sem inst`. In the file `sem` is one-based, with
//! `classes + 1` meaning background; unlabeled scenes write `0 0`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::PointCloud;
use crate::error::{Error, Result};

const MAGIC: &str = "sgiformer-scene 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    /// Voxel size suggested by the producer of the file.
    pub voxel_size: f64,
}

pub fn write_scene_to(mut w: impl Write, pc: &PointCloud, voxel_size: f64) -> Result<()> {
    pc.validate()?;
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "points {}", pc.len())?;
    writeln!(w, "voxel_size {voxel_size}")?;
    writeln!(w, "classes {}", pc.num_classes)?;
    writeln!(w, "labeled {}", u8::from(pc.has_labels()))?;
    writeln!(w, "end_header")?;
    for i in 0..pc.len() {
        let [x, y, z] = pc.coords[i];
        let [r, g, b] = pc.colors[i];
        let (sem, inst) = match (&pc.semantic, &pc.instance) {
            (Some(s), Some(t)) => (s[i] + 1, t[i]),
            _ => (0, 0),
        };
        writeln!(w, "{x} {y} {z} {r} {g} {b} {sem} {inst}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scene(path: &Path, pc: &PointCloud, voxel_size: f64) -> Result<()> {
    write_scene_to(BufWriter::new(File::create(path)?), pc, voxel_size)
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    read_scene_from(BufReader::new(File::open(path)?), path)
}

/// Parses a scene; `path` is only used in error messages.
pub fn read_scene_from(r: impl Read, path: &Path) -> Result<Scene> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let err = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line: line + 1,
        msg,
    };
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i, l?)),
            None => Err(Error::Parse {
                path: PathBuf::from(path),
                line: 0,
                msg: format!("unexpected end of file, expected {what}"),
            }),
        }
    };

    let (i, magic) = next("header")?;
    if magic.trim() != MAGIC {
        return Err(err(i, format!("expected `{MAGIC}`, found `{}`", magic.trim())));
    }
    let mut field = |key: &str| -> Result<String> {
        let (i, line) = next(key)?;
        match line.trim().split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim().to_string()),
            _ => Err(err(i, format!("expected `{key} <value>`"))),
        }
    };
    let n: usize = parse_field(&field("points")?, "points", path)?;
    let voxel_size: f64 = parse_field(&field("voxel_size")?, "voxel_size", path)?;
    let classes: usize = parse_field(&field("classes")?, "classes", path)?;
    let labeled = match field("labeled")?.as_str() {
        "0" => false,
        "1" => true,
        other => return Err(err(4, format!("labeled must be 0 or 1, found `{other}`"))),
    };
    let (i, end) = next("end_header")?;
    if end.trim() != "end_header" {
        return Err(err(i, "expected `end_header`".into()));
    }

    let mut coords = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut semantic = Vec::with_capacity(n);
    let mut instance = Vec::with_capacity(n);
    for _ in 0..n {
        let (i, line) = next("point record")?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(err(i, format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 6];
        for (slot, f) in v.iter_mut().zip(&fields[..6]) {
            *slot = f.parse().map_err(|_| err(i, format!("bad number `{f}`")))?;
        }
        coords.push([v[0], v[1], v[2]]);
        colors.push([v[3], v[4], v[5]]);
        let sem: usize = fields[6].parse().map_err(|_| err(i, format!("bad label `{}`", fields[6])))?;
        let inst: u32 = fields[7].parse().map_err(|_| err(i, format!("bad instance `{}`", fields[7])))?;
        if labeled {
            if sem == 0 || sem > classes + 1 {
                return Err(err(i, format!("semantic label {sem} outside 1..={}", classes + 1)));
            }
            semantic.push(sem - 1);
            instance.push(inst);
        }
    }
    if let Some((i, line)) = lines.find(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty())) {
        line?;
        return Err(err(i, format!("more than {n} point records")));
    }

    let mut cloud = PointCloud::new(coords, colors, classes)?;
    if labeled {
        cloud = cloud.with_labels(semantic, instance)?;
    }
    Ok(Scene { cloud, voxel_size })
}

fn parse_field<T: std::str::FromStr>(v: &str, key: &str, path: &Path) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        path: PathBuf::from(path),
        line: 0,
        msg: format!("invalid value `{v}` for {key}"),
    })
}

/// Stable, well-separated color for an instance id; id 0 is gray.
pub fn instance_color(id: u32) -> [u8; 3] {
    if id == 0 {
        return [128, 128, 128];
    }
    // Golden-ratio hue walk at full saturation.
    let h = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let q = |c: f64| (40.0 + 215.0 * c).round() as u8;
    [q(r), q(g), q(b)]
}

/// ASCII PLY of points colored by instance id.
pub fn write_ply_to(mut w: impl Write, coords: &[[f64; 3]], instance: &[u32]) -> Result<()> {
    if coords.len() != instance.len() {
        return Err(Error::invalid(
            "write_ply",
            format!("{} points but {} instance ids", coords.len(), instance.len()),
        ));
    }
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", coords.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property float {axis}")?;
    }
    for channel in ["red", "green", "blue"] {
        writeln!(w, "property uchar {channel}")?;
    }
    writeln!(w, "property int instance")?;
    writeln!(w, "end_header")?;
    for (p, &id) in coords.iter().zip(instance) {
        let [r, g, b] = instance_color(id);
        writeln!(w, "{} {} {} {r} {g} {b} {id}", p[0] as f32, p[1] as f32, p[2] as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ply(path: &Path, coords: &[[f64; 3]], instance: &[u32]) -> Result<()> {
    write_ply_to(BufWriter::new(File::create(path)?), coords, instance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointCloud {
        PointCloud::new(
            vec![[0.1, -0.2, 0.3], [1.0 / 3.0, 2.5, 0.0], [7.0, 8.0, 9.0]],
            vec![[0.0, 0.5, 1.0], [0.1, 0.2, 0.3], [1.0, 1.0, 1.0]],
            2,
        )
        .unwrap()
        .with_labels(vec![0, 2, 1], vec![4, 0, 7])
        .unwrap()
    }

    fn roundtrip(pc: &PointCloud) -> Scene {
        let mut buf = Vec::new();
        write_scene_to(&mut buf, pc, 0.02).unwrap();
        read_scene_from(buf.as_slice(), Path::new("mem")).unwrap()
    }

    #[test]
    fn labeled_scene_roundtrips_exactly() {
        let pc = sample();
        let scene = roundtrip(&pc);
        assert_eq!(scene.cloud, pc);
        assert_eq!(scene.voxel_size, 0.02);
    }

    #[test]
    fn unlabeled_scene_roundtrips() {
        let mut pc = sample();
        pc.semantic = None;
        pc.instance = None;
        assert_eq!(roundtrip(&pc).cloud, pc);
    }

    #[test]
    fn labels_are_one_based_on_disk() {
        let mut buf = Vec::new();
        write_scene_to(&mut buf, &sample(), 0.02).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let records: Vec<&str> = text.lines().skip(6).collect();
        assert!(records[0].ends_with(" 1 4"));
        assert!(records[1].ends_with(" 3 0"));
    }

    #[test]
    fn malformed_files_report_line() {
        let bad = "sgiformer-scene 1\npoints 1\nvoxel_size 0.02\nclasses 2\nlabeled 1\nend_header\n0 0 0 0 0 0 9 0\n";
        match read_scene_from(bad.as_bytes(), Path::new("x")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
        let short = "sgiformer-scene 1\npoints 2\nvoxel_size 0.02\nclasses 2\nlabeled 0\nend_header\n0 0 0 0 0 0 0 0\n";
        assert!(read_scene_from(short.as_bytes(), Path::new("x")).is_err());
        assert!(read_scene_from("ply\n".as_bytes(), Path::new("x")).is_err());
    }

    #[test]
    fn ply_header_is_well_formed() {
        let mut buf = Vec::new();
        write_ply_to(&mut buf, &[[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]], &[0, 3]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "ply");
        assert_eq!(lines[1], "format ascii 1.0");
        assert_eq!(lines[2], "element vertex 2");
        let end = lines.iter().position(|l| *l == "end_header").unwrap();
        assert_eq!(lines.len() - end - 1, 2);
        let props = lines[3..end].iter().filter(|l| l.starts_with("property")).count();
        assert_eq!(lines[end + 1].split_whitespace().count(), props);
        assert!(lines[end + 1].starts_with("0 1 2 128 128 128 0"));
    }

    #[test]
    fn instance_colors_differ_for_neighbors() {
        for id in 1..50 {
            assert_ne!(instance_color(id), instance_color(id + 1));
        }
    }
}
