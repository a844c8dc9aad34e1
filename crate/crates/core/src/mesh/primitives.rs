use std::collections::HashMap;

use super::TriangleMesh;
use crate::scalar::{lit, Scalar};

fn v<T: Scalar>(x: f64, y: f64, z: f64) -> [T; 3] {
    [lit(x), lit(y), lit(z)]
}

/// Axis-aligned cube spanning [-0.5, 0.5]^3, 8 vertices and 12 outward-wound faces.
pub(super) fn unit_cube<T: Scalar>(color: [T; 3]) -> TriangleMesh<T> {
    let mut vertices = Vec::with_capacity(8);
    for i in 0..8 {
        let c = |bit: usize| if i & bit != 0 { 0.5 } else { -0.5 };
        vertices.push(v(c(1), c(2), c(4)));
    }
    let faces = vec![
        [0, 2, 3],
        [0, 3, 1], // z-
        [4, 5, 7],
        [4, 7, 6], // z+
        [0, 1, 5],
        [0, 5, 4], // y-
        [2, 6, 7],
        [2, 7, 3], // y+
        [0, 4, 6],
        [0, 6, 2], // x-
        [1, 3, 7],
        [1, 7, 5], // x+
    ];
    TriangleMesh {
        colors: vec![color; vertices.len()],
        vertices,
        faces,
    }
}

/// Square in the z = 0 plane spanning [-0.5, 0.5]^2, facing -z.
pub(super) fn unit_quad<T: Scalar>(color: [T; 3]) -> TriangleMesh<T> {
    let vertices = vec![
        v(-0.5, -0.5, 0.0),
        v(0.5, -0.5, 0.0),
        v(0.5, 0.5, 0.0),
        v(-0.5, 0.5, 0.0),
    ];
    TriangleMesh {
        colors: vec![color; 4],
        vertices,
        faces: vec![[0, 2, 1], [0, 3, 2]],
    }
}

/// Subdivided icosahedron of radius 0.5; `20 * 4^n` faces.
pub(super) fn icosphere<T: Scalar>(subdivisions: u32, color: [T; 3]) -> TriangleMesh<T> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut pts: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let normalize = |p: [f64; 3]| {
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        [p[0] / n, p[1] / n, p[2] / n]
    };
    for p in pts.iter_mut() {
        *p = normalize(*p);
    }
    for _ in 0..subdivisions {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, pts: &mut Vec<[f64; 3]>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let (pa, pb) = (pts[a as usize], pts[b as usize]);
                pts.push(normalize([
                    (pa[0] + pb[0]) / 2.0,
                    (pa[1] + pb[1]) / 2.0,
                    (pa[2] + pb[2]) / 2.0,
                ]));
                (pts.len() - 1) as u32
            })
        };
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut pts);
            let bc = midpoint(b, c, &mut pts);
            let ca = midpoint(c, a, &mut pts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriangleMesh {
        colors: vec![color; pts.len()],
        vertices: pts.iter().map(|p| v(p[0] * 0.5, p[1] * 0.5, p[2] * 0.5)).collect(),
        faces,
    }
}
