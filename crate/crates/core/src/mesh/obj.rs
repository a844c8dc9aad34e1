//! Wavefront OBJ with the common `v x y z r g b` vertex-color extension.

use std::fmt::Write as _;
use std::path::Path;

use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

/// Serializes one or more named meshes as `o` groups sharing a vertex list.
pub fn to_obj_string<T: Scalar>(objects: &[(&str, &TriangleMesh<T>)]) -> String {
    let mut out = String::from("# combiverse mesh export\n");
    let mut offset = 1usize;
    for (name, mesh) in objects {
        let _ = writeln!(out, "o {name}");
        for (p, c) in mesh.vertices.iter().zip(&mesh.colors) {
            let _ = writeln!(
                out,
                "v {:.9} {:.9} {:.9} {:.6} {:.6} {:.6}",
                to_f64(p[0]),
                to_f64(p[1]),
                to_f64(p[2]),
                to_f64(c[0]),
                to_f64(c[1]),
                to_f64(c[2])
            );
        }
        for f in &mesh.faces {
            let _ = writeln!(
                out,
                "f {} {} {}",
                f[0] as usize + offset,
                f[1] as usize + offset,
                f[2] as usize + offset
            );
        }
        offset += mesh.vertices.len();
    }
    out
}

pub fn write_obj<T: Scalar>(path: &Path, objects: &[(&str, &TriangleMesh<T>)]) -> Result<()> {
    std::fs::write(path, to_obj_string(objects)).map_err(|e| Error::io(path, e))
}

/// Parses every group of an OBJ file; polygons are fan-triangulated and
/// vertices without color default to mid gray.
pub fn parse_obj<T: Scalar>(text: &str) -> Result<Vec<(String, TriangleMesh<T>)>> {
    let mut positions: Vec<[T; 3]> = Vec::new();
    let mut colors: Vec<[T; 3]> = Vec::new();
    // (name, faces in global 0-based indices)
    let mut groups: Vec<(String, Vec<[u32; 3]>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        let mut parts = line.split_whitespace();
        let bad = |what: &str| Error::Mesh(format!("OBJ line {}: {what}", lineno + 1));
        match parts.next() {
            Some("v") => {
                let nums: Vec<f64> = parts
                    .map(|s| s.parse::<f64>().map_err(|_| bad("bad number")))
                    .collect::<Result<_>>()?;
                if nums.len() < 3 {
                    return Err(bad("vertex needs 3 coordinates"));
                }
                positions.push([lit(nums[0]), lit(nums[1]), lit(nums[2])]);
                colors.push(if nums.len() >= 6 {
                    [lit(nums[3]), lit(nums[4]), lit(nums[5])]
                } else {
                    [lit(0.5); 3]
                });
            }
            Some("o") | Some("g") => {
                let name = parts.collect::<Vec<_>>().join(" ");
                groups.push((name, Vec::new()));
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| bad("bad face index"))?;
                        let resolved = if i < 0 { positions.len() as i64 + i } else { i - 1 };
                        if resolved < 0 || resolved >= positions.len() as i64 {
                            return Err(bad("face index out of range"));
                        }
                        Ok(resolved as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs 3 vertices"));
                }
                if groups.is_empty() {
                    groups.push(("object".to_string(), Vec::new()));
                }
                let faces = &mut groups.last_mut().unwrap().1;
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (name, faces) in groups {
        if faces.is_empty() {
            continue;
        }
        // Re-index each group onto its own compact vertex list.
        let used: std::collections::BTreeSet<u32> = faces.iter().flatten().copied().collect();
        let remap: std::collections::HashMap<u32, u32> = used.iter().enumerate().map(|(l, &g)| (g, l as u32)).collect();
        let mesh = TriangleMesh::new(
            used.iter().map(|&g| positions[g as usize]).collect(),
            faces.iter().map(|f| f.map(|i| remap[&i])).collect(),
            used.iter().map(|&g| colors[g as usize]).collect(),
        )?;
        out.push((name, mesh));
    }
    if out.is_empty() {
        return Err(Error::Mesh("OBJ contains no faces".into()));
    }
    Ok(out)
}

/// Reads an OBJ file as a single mesh (all groups merged).
pub fn read_obj<T: Scalar>(path: &Path) -> Result<TriangleMesh<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let groups = parse_obj::<T>(&text)?;
    TriangleMesh::merge(groups.iter().map(|(_, m)| m))
}
