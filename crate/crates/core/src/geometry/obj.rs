//! Minimal Wavefront OBJ reader/writer: `v x y z` and triangular `f i j k` lines.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::{GeometryError, TriangleMesh};
use crate::math::Point;

pub fn parse_obj(text: &str) -> Result<TriangleMesh, GeometryError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut ignored = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let err = |message: String| GeometryError::Obj { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        match tokens.next() {
            None => {}
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad coordinate {t:?}: {e}"))))
                    .collect::<Result<_, _>>()?;
                if coords.len() < 3 {
                    return Err(err(format!("vertex needs 3 coordinates, got {}", coords.len())));
                }
                vertices.push(Point::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = tokens
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        match head.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(err(format!("bad face index {t:?} (1-based positive indices only)"))),
                        }
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(err(format!("only triangular faces are supported, got {} indices", idx.len())));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            Some(other) => {
                ignored.insert(other.to_string());
            }
        }
    }
    for kind in ignored {
        log::warn!("obj: ignoring `{kind}` lines");
    }
    TriangleMesh::new(vertices, faces)
}

pub fn load_obj(path: &Path) -> Result<TriangleMesh, GeometryError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GeometryError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_obj(&text)
}

pub fn to_obj_string(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}
