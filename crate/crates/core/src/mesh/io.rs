//! OBJ (v/f only) for meshes; XYZ and ASCII PLY for point clouds.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{Mesh, MeshError, PointCloud, Vec3};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

fn parse_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { line, message: message.into() }
}

fn parse_f64(tok: Option<&str>, line: usize) -> Result<f64, IoError> {
    tok.ok_or_else(|| parse_err(line, "missing coordinate"))?
        .parse::<f64>()
        .map_err(|e| parse_err(line, e.to_string()))
}

pub fn obj_to_string(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(mesh.vertex_count() * 40 + mesh.face_count() * 20);
    for v in mesh.vertices() {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, obj_to_string(mesh))?;
    Ok(())
}

pub fn parse_obj(text: &str) -> Result<Mesh, IoError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = parse_f64(toks.next(), line)?;
                let y = parse_f64(toks.next(), line)?;
                let z = parse_f64(toks.next(), line)?;
                vertices.push(Vec3::new(x, y, z));
            }
            Some("f") => {
                let idx: Vec<usize> = toks
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| parse_err(line, format!("bad index {t:?}")))?;
                        if i < 1 {
                            return Err(parse_err(line, "indices are 1-based"));
                        }
                        Ok(i as usize - 1)
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(parse_err(line, "only triangular faces are supported"));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Ok(Mesh::new(vertices, faces)?)
}

pub fn read_obj(path: &Path) -> Result<Mesh, IoError> {
    parse_obj(&std::fs::read_to_string(path)?)
}

/// One point per line: `x y z` or `x y z nx ny nz`.
pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    let mut s = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        match cloud.normals() {
            Some(ns) => {
                let n = ns[i];
                let _ = writeln!(s, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z);
            }
            None => {
                let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
            }
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_xyz(path: &Path) -> Result<PointCloud, IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let vals: Vec<f64> = raw
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(ln + 1, e.to_string())))
            .collect::<Result<_, _>>()?;
        match vals.len() {
            0 => continue,
            3 => points.push(Vec3::new(vals[0], vals[1], vals[2])),
            6 => {
                points.push(Vec3::new(vals[0], vals[1], vals[2]));
                normals.push(Vec3::new(vals[3], vals[4], vals[5]));
            }
            n => return Err(parse_err(ln + 1, format!("expected 3 or 6 columns, got {n}"))),
        }
    }
    if normals.is_empty() {
        Ok(PointCloud::new(points))
    } else {
        Ok(PointCloud::with_normals(points, normals)?)
    }
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals().is_some() {
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        if let Some(ns) = cloud.normals() {
            let _ = write!(s, " {} {} {}", ns[i].x, ns[i].y, ns[i].z);
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "missing ply magic")),
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    for (ln, raw) in lines.by_ref() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err(parse_err(ln + 1, "only ascii ply is supported")),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| parse_err(ln + 1, e.to_string()))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| parse_err(0, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(0, "vertex element lacks x/y/z")),
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(x), Some(y), Some(z)) => Some((x, y, z)),
        _ => None,
    };
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::new();
    for (ln, raw) in lines.take(count) {
        let vals: Vec<f64> = raw
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(ln + 1, e.to_string())))
            .collect::<Result<_, _>>()?;
        if vals.len() < props.len() {
            return Err(parse_err(ln + 1, "short vertex record"));
        }
        points.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
        if let Some((x, y, z)) = normal_cols {
            normals.push(Vec3::new(vals[x], vals[y], vals[z]));
        }
    }
    if points.len() != count {
        return Err(parse_err(0, "fewer vertex records than declared"));
    }
    if normal_cols.is_some() {
        Ok(PointCloud::with_normals(points, normals)?)
    } else {
        Ok(PointCloud::new(points))
    }
}
