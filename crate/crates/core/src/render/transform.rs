use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::scalar::Scalar;
use crate::scene::PlacementParams;

pub type Mat3<T> = [[T; 3]; 3];

fn matmul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// Rotation for extrinsic X-Y-Z Euler angles: `Rz(rz) * Ry(ry) * Rx(rx)`.
pub fn rotation_matrix<T: Scalar>(r: [T; 3]) -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    let (sa, ca) = r[0].sin_cos();
    let (sb, cb) = r[1].sin_cos();
    let (sg, cg) = r[2].sin_cos();
    let rx = [[o, z, z], [z, ca, -sa], [z, sa, ca]];
    let ry = [[cb, z, sb], [z, o, z], [-sb, z, cb]];
    let rz = [[cg, -sg, z], [sg, cg, z], [z, z, o]];
    matmul(&rz, &matmul(&ry, &rx))
}

#[inline]
pub fn mat_vec<T: Scalar>(m: &Mat3<T>, v: [T; 3]) -> [T; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// `R(r) * (s * v) + t` for a single point.
#[inline]
pub fn place_point<T: Scalar>(v: [T; 3], scale: T, rotation: &Mat3<T>, translation: [T; 3]) -> [T; 3] {
    let r = mat_vec(rotation, [v[0] * scale, v[1] * scale, v[2] * scale]);
    [r[0] + translation[0], r[1] + translation[1], r[2] + translation[2]]
}

/// Transformed vertex positions of `mesh` under `params`.
pub fn apply_transform<T: Scalar>(mesh: &TriangleMesh<T>, params: &PlacementParams<T>) -> Result<Vec<[T; 3]>> {
    params
        .validate()
        .map_err(|e| Error::validation(format!("apply_transform: {e}")))?;
    let rot = rotation_matrix(params.rotation);
    Ok(mesh
        .vertices
        .iter()
        .map(|&v| place_point(v, params.scale, &rot, params.translation))
        .collect())
}

/// Copy of `mesh` with the placement baked into its vertices.
pub fn bake<T: Scalar>(mesh: &TriangleMesh<T>, params: &PlacementParams<T>) -> Result<TriangleMesh<T>> {
    Ok(TriangleMesh {
        vertices: apply_transform(mesh, params)?,
        faces: mesh.faces.clone(),
        colors: mesh.colors.clone(),
    })
}
