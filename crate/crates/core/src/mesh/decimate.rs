//! Face-budget reduction by uniform vertex clustering.
//!
//! Vertices are snapped to a regular grid over the mesh bounds, each cell is
//! replaced by the mean of its vertices, and faces that collapse are dropped.
//! The grid resolution is the largest one whose output fits the budget.

use std::collections::{HashMap, HashSet};

use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

pub const DEFAULT_FACE_BUDGET: usize = 50_000;

const MAX_RESOLUTION: u32 = 2048;

pub fn decimate_mesh<T: Scalar>(mesh: &TriangleMesh<T>, target_faces: usize) -> Result<TriangleMesh<T>> {
    if target_faces < 4 {
        return Err(Error::validation(format!(
            "target_faces must be at least 4, got {target_faces}"
        )));
    }
    mesh.validate()?;
    if mesh.faces.len() <= target_faces {
        return Ok(mesh.clone());
    }

    // Largest resolution with face count within budget (count grows with
    // resolution, though not strictly, so confirm after the search).
    let (mut lo, mut hi) = (1u32, MAX_RESOLUTION);
    let mut best: Option<TriangleMesh<T>> = None;
    while lo <= hi {
        let mid = lo + (hi - lo) / 2;
        let candidate = cluster(mesh, mid);
        if candidate.faces.len() <= target_faces {
            lo = mid + 1;
            if !candidate.faces.is_empty() {
                best = Some(candidate);
            }
        } else {
            hi = mid - 1;
        }
    }
    match best {
        Some(m) if !m.faces.is_empty() => {
            m.validate().map_err(|e| Error::Decimation(e.to_string()))?;
            Ok(m)
        }
        _ => Err(Error::Decimation(format!(
            "no grid resolution yields between 1 and {target_faces} faces"
        ))),
    }
}

fn cluster<T: Scalar>(mesh: &TriangleMesh<T>, resolution: u32) -> TriangleMesh<T> {
    let (min, max) = mesh.bounds();
    let longest = (0..3).map(|k| to_f64(max[k] - min[k])).fold(0.0, f64::max).max(1e-12);
    let cell = longest / resolution as f64;
    let key = |p: &[T; 3]| -> [u32; 3] {
        [0, 1, 2].map(|k| {
            let span = to_f64(max[k] - min[k]);
            let cells = ((span / cell).ceil() as u32).max(1);
            (((to_f64(p[k] - min[k])) / cell).floor() as u32).min(cells - 1)
        })
    };

    let mut cell_of: HashMap<[u32; 3], u32> = HashMap::new();
    let mut sums: Vec<([f64; 3], [f64; 3], usize)> = Vec::new();
    let mut remap = Vec::with_capacity(mesh.vertices.len());
    for (p, c) in mesh.vertices.iter().zip(&mesh.colors) {
        let k = key(p);
        let id = *cell_of.entry(k).or_insert_with(|| {
            sums.push(([0.0; 3], [0.0; 3], 0));
            (sums.len() - 1) as u32
        });
        let s = &mut sums[id as usize];
        for d in 0..3 {
            s.0[d] += to_f64(p[d]);
            s.1[d] += to_f64(c[d]);
        }
        s.2 += 1;
        remap.push(id);
    }

    let mut seen = HashSet::new();
    let mut faces = Vec::new();
    for f in &mesh.faces {
        let g = f.map(|i| remap[i as usize]);
        if g[0] == g[1] || g[1] == g[2] || g[0] == g[2] {
            continue;
        }
        let mut sorted = g;
        sorted.sort_unstable();
        if seen.insert(sorted) {
            faces.push(g);
        }
    }

    // Drop clusters no surviving face references.
    let mut used = vec![u32::MAX; sums.len()];
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    for f in faces.iter_mut() {
        for i in f.iter_mut() {
            if used[*i as usize] == u32::MAX {
                let (p, c, n) = sums[*i as usize];
                let n = n as f64;
                vertices.push([0, 1, 2].map(|d| lit::<T>(p[d] / n)));
                colors.push([0, 1, 2].map(|d| lit::<T>(c[d] / n)));
                used[*i as usize] = (vertices.len() - 1) as u32;
            }
            *i = used[*i as usize];
        }
    }
    TriangleMesh {
        vertices,
        faces,
        colors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn under_budget_is_unchanged() {
        let m = TriangleMesh::<f64>::unit_cube([0.1, 0.2, 0.3]);
        assert_eq!(decimate_mesh(&m, 12).unwrap(), m);
        // A cube has no clustering between 12 faces and none at all.
        assert!(matches!(decimate_mesh(&m, 4), Err(Error::Decimation(_))));
    }

    #[test]
    fn icosphere_budget_and_bounds() {
        let m = TriangleMesh::<f64>::icosphere(5, [0.5; 3]);
        assert_eq!(m.faces.len(), 20_480);
        let d = decimate_mesh(&m, 5_000).unwrap();
        assert!(d.faces.len() <= 5_000, "{} faces", d.faces.len());
        assert!(d.faces.len() > 1_000, "over-decimated to {} faces", d.faces.len());
        let (e0, e1) = (m.extent(), d.extent());
        for k in 0..3 {
            assert!(
                (e1[k] - e0[k]).abs() <= 0.05 * e0[k],
                "axis {k}: {} vs {}",
                e1[k],
                e0[k]
            );
        }
        let (lo0, hi0) = m.bounds();
        let (lo1, hi1) = d.bounds();
        for k in 0..3 {
            assert!((lo1[k] - lo0[k]).abs() <= 0.05 * e0[k]);
            assert!((hi1[k] - hi0[k]).abs() <= 0.05 * e0[k]);
        }
    }

    #[test]
    fn tiny_target_is_rejected() {
        let m = TriangleMesh::<f64>::unit_cube([0.0; 3]);
        assert!(decimate_mesh(&m, 3).is_err());
    }

    #[test]
    fn default_budget() {
        assert_eq!(DEFAULT_FACE_BUDGET, 50_000);
    }
}
