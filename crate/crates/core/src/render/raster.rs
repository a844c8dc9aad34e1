use std::collections::HashMap;

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use super::{
    apply_transform, place_point, rotation_matrix, ComposedScene, ParamGrad, RenderGrad, RenderOutput, RenderSettings,
};
use crate::autodiff::Dual;
use crate::camera::{CameraSpec, NEAR_PLANE};
use crate::error::{Error, Result};
use crate::raster::Plane;
use crate::scalar::{lit, to_f64, Scalar};

/// Blur margin in units of the edge temperature: silhouette edges farther
/// than `sqrt(CUTOFF * temp)` pixels do not affect a pixel.
const CUTOFF: f64 = 28.0;

/// Autodiff slots for attribute interpolation: up to three vertices, `(u, v, z)` each.
type D<T> = Dual<T, 9>;

struct Face {
    object: usize,
    verts: [usize; 3],
}

struct Edge {
    object: usize,
    verts: [usize; 2],
}

struct Prepared<T> {
    screen: Vec<[T; 3]>,
    colors: Vec<[T; 3]>,
    faces: Vec<Face>,
    edges: Vec<Edge>,
    face_bins: Vec<Vec<u32>>,
    edge_bins: Vec<Vec<u32>>,
    objects: usize,
    tile: usize,
    tiles_x: usize,
    width: usize,
    height: usize,
    inv_temp: T,
    margin2: T,
}

/// Pixel-center index range `[lo, hi]` covering `[a, b]` in screen units.
fn pixel_span<T: Scalar>(a: T, b: T, n: usize) -> Option<(usize, usize)> {
    let lo = (to_f64(a) - 0.5).ceil().max(0.0);
    let hi = (to_f64(b) - 0.5).floor().min(n as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

fn signed_area<S: Scalar>(a: [S; 3], b: [S; 3], c: [S; 3]) -> S {
    (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
}

fn barycentric<S: Scalar>(tri: &[[S; 3]; 3], px: S, py: S) -> [S; 3] {
    let [a, b, c] = *tri;
    let area = signed_area(a, b, c);
    let edge = |p: [S; 3], q: [S; 3]| ((p[0] - px) * (q[1] - py) - (q[0] - px) * (p[1] - py)) / area;
    [edge(b, c), edge(c, a), edge(a, b)]
}

/// Squared distance to segment `ab` and the clamped projection parameter.
fn segment<S: Scalar>(px: S, py: S, a: [S; 3], b: [S; 3]) -> (S, S) {
    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
    let (wx, wy) = (px - a[0], py - a[1]);
    let len2 = ex * ex + ey * ey;
    let t = if len2 > S::zero() {
        ((wx * ex + wy * ey) / len2).max(S::zero()).min(S::one())
    } else {
        S::zero()
    };
    let (dx, dy) = (wx - t * ex, wy - t * ey);
    (dx * dx + dy * dy, t)
}

impl<T: Scalar> Prepared<T> {
    fn new(scene: &ComposedScene<'_, T>, camera: &CameraSpec<T>, settings: &RenderSettings<T>) -> Result<Self> {
        scene.validate()?;
        camera.validate()?;
        settings.validate()?;
        let (width, height) = (camera.width, camera.height);
        let extent: T = lit(width.max(height) as f64);
        let temp = settings.sigma * extent * extent;
        let margin = (lit::<T>(CUTOFF) * temp).sqrt();
        let tile = settings.tile_size;
        let tiles_x = width.div_ceil(tile);
        let tiles_y = height.div_ceil(tile);
        let near: T = lit(NEAR_PLANE);

        let mut screen = Vec::new();
        let mut colors = Vec::new();
        let mut faces = Vec::new();
        let mut edges = Vec::new();
        for (oi, obj) in scene.objects.iter().enumerate() {
            let base = screen.len();
            let world = apply_transform(obj.mesh, &obj.params)?;
            screen.extend(world.iter().map(|&p| camera.project(p)));
            colors.extend_from_slice(&obj.mesh.colors);
            let local = &screen[base..];
            // Per-face screen orientation; 0 marks faces that are not drawn.
            let orient: Vec<i8> = obj
                .mesh
                .faces
                .iter()
                .map(|f| {
                    let [a, b, c] = f.map(|i| local[i as usize]);
                    if [a, b, c]
                        .iter()
                        .any(|v| !(v[2] > near) || !v[0].is_finite() || !v[1].is_finite())
                    {
                        return 0;
                    }
                    let area = signed_area(a, b, c);
                    if area > lit(1e-12) {
                        1
                    } else if area < lit(-1e-12) {
                        -1
                    } else {
                        0
                    }
                })
                .collect();
            let mut adjacency: HashMap<(u32, u32), (u8, u8)> = HashMap::new();
            let mut order = Vec::new();
            for (fi, f) in obj.mesh.faces.iter().enumerate() {
                if orient[fi] == 0 {
                    continue;
                }
                faces.push(Face {
                    object: oi,
                    verts: f.map(|i| base + i as usize),
                });
                for k in 0..3 {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    let key = (a.min(b), a.max(b));
                    let slot = adjacency.entry(key).or_insert_with(|| {
                        order.push(key);
                        (0, 0)
                    });
                    if orient[fi] > 0 {
                        slot.0 += 1;
                    } else {
                        slot.1 += 1;
                    }
                }
            }
            // Silhouette edges: open, or shared by faces of opposite orientation.
            for key in order {
                let (pos, neg) = adjacency[&key];
                if pos + neg == 1 || (pos > 0 && neg > 0) {
                    edges.push(Edge {
                        object: oi,
                        verts: [base + key.0 as usize, base + key.1 as usize],
                    });
                }
            }
        }

        let mut face_bins = vec![Vec::new(); tiles_x * tiles_y];
        for (id, f) in faces.iter().enumerate() {
            let t = f.verts.map(|i| screen[i]);
            let xs = pixel_span(
                t[0][0].min(t[1][0]).min(t[2][0]),
                t[0][0].max(t[1][0]).max(t[2][0]),
                width,
            );
            let ys = pixel_span(
                t[0][1].min(t[1][1]).min(t[2][1]),
                t[0][1].max(t[1][1]).max(t[2][1]),
                height,
            );
            if let (Some((x0, x1)), Some((y0, y1))) = (xs, ys) {
                for ty in y0 / tile..=y1 / tile {
                    for tx in x0 / tile..=x1 / tile {
                        face_bins[ty * tiles_x + tx].push(id as u32);
                    }
                }
            }
        }
        let mut edge_bins = vec![Vec::new(); tiles_x * tiles_y];
        for (id, e) in edges.iter().enumerate() {
            let [a, b] = e.verts.map(|i| screen[i]);
            let xs = pixel_span(a[0].min(b[0]) - margin, a[0].max(b[0]) + margin, width);
            let ys = pixel_span(a[1].min(b[1]) - margin, a[1].max(b[1]) + margin, height);
            if let (Some((x0, x1)), Some((y0, y1))) = (xs, ys) {
                for ty in y0 / tile..=y1 / tile {
                    for tx in x0 / tile..=x1 / tile {
                        edge_bins[ty * tiles_x + tx].push(id as u32);
                    }
                }
            }
        }
        Ok(Self {
            screen,
            colors,
            faces,
            edges,
            face_bins,
            edge_bins,
            objects: scene.objects.len(),
            tile,
            tiles_x,
            width,
            height,
            inv_temp: T::one() / temp,
            margin2: margin * margin,
        })
    }

    /// Per object: the nearest face containing the pixel and every
    /// silhouette edge within the blur margin.
    fn select(&self, x: usize, y: usize, picks: &mut [Pick<T>]) {
        for p in picks.iter_mut() {
            p.face = None;
            p.edges.clear();
        }
        let bin = (y / self.tile) * self.tiles_x + x / self.tile;
        let (px, py) = (lit::<T>(x as f64 + 0.5), lit::<T>(y as f64 + 0.5));
        for &fi in &self.face_bins[bin] {
            let f = &self.faces[fi as usize];
            let tri = f.verts.map(|i| self.screen[i]);
            let w = barycentric(&tri, px, py);
            if w.iter().all(|&v| v >= T::zero()) {
                let z = w[0] * tri[0][2] + w[1] * tri[1][2] + w[2] * tri[2][2];
                let p = &mut picks[f.object];
                if p.face.is_none_or(|(_, best)| z < best) {
                    p.face = Some((fi as usize, z));
                }
            }
        }
        for &ei in &self.edge_bins[bin] {
            let e = &self.edges[ei as usize];
            let [a, b] = e.verts.map(|i| self.screen[i]);
            let (d2, _) = segment(px, py, a, b);
            if d2 < self.margin2 {
                picks[e.object].edges.push((ei as usize, d2));
            }
        }
    }

    /// Coverage from the nearby silhouette edges and its derivative with
    /// respect to each edge's squared distance.
    ///
    /// The edges combine into `h = 1 / sum(1/d² - 1/m²)`, which is zero on any
    /// edge, smooth across corners, and infinite at the margin `m`.
    fn coverage(&self, inside: bool, edges: &[(usize, T)], dcov: &mut Vec<T>) -> Option<T> {
        dcov.clear();
        if edges.is_empty() {
            return inside.then(T::one);
        }
        let inv_m2 = T::one() / self.margin2;
        if edges.iter().any(|&(_, d2)| d2 <= lit(1e-18)) {
            dcov.resize(edges.len(), T::zero());
            return Some(lit(0.5));
        }
        let total: T = edges.iter().map(|&(_, d2)| T::one() / d2 - inv_m2).sum();
        if !(total > T::zero()) {
            return inside.then(T::one);
        }
        let h = T::one() / total;
        let sign = if inside { T::one() } else { -T::one() };
        let logit = sign * h * self.inv_temp;
        let cov = sigmoid(logit);
        let slope = cov * (T::one() - cov) * sign * self.inv_temp * h * h;
        dcov.extend(edges.iter().map(|&(_, d2)| slope / (d2 * d2)));
        Some(cov)
    }

    /// Depth and color at the pixel, lifted into `S` with `var` marking the
    /// screen coordinates of the contributing vertices.
    fn attributes<S: Scalar>(
        &self,
        pick: &Pick<T>,
        x: usize,
        y: usize,
        var: impl Fn(T, usize) -> S,
    ) -> Option<(S, [S; 3])> {
        let konst = |t: T| S::from(t).expect("finite scalar");
        let (px, py) = (konst(lit(x as f64 + 0.5)), konst(lit(y as f64 + 0.5)));
        let lift = |vi: usize, slot: usize| -> ([S; 3], [S; 3]) {
            let s = self.screen[vi];
            (
                [var(s[0], 3 * slot), var(s[1], 3 * slot + 1), var(s[2], 3 * slot + 2)],
                self.colors[vi].map(konst),
            )
        };
        if let Some((fi, _)) = pick.face {
            let verts = self.faces[fi].verts;
            let l = [lift(verts[0], 0), lift(verts[1], 1), lift(verts[2], 2)];
            let tri = [l[0].0, l[1].0, l[2].0];
            let w = barycentric(&tri, px, py).map(|v| v.max(S::zero()));
            let total = w[0] + w[1] + w[2];
            let w = w.map(|v| v / total);
            return Some((
                w[0] * tri[0][2] + w[1] * tri[1][2] + w[2] * tri[2][2],
                [0, 1, 2].map(|k| w[0] * l[0].1[k] + w[1] * l[1].1[k] + w[2] * l[2].1[k]),
            ));
        }
        let ei = pick.nearest_edge()?;
        let [va, vb] = self.edges[ei].verts;
        let ((a, ca), (b, cb)) = (lift(va, 0), lift(vb, 1));
        let (_, t) = segment(px, py, a, b);
        let s = S::one() - t;
        Some((s * a[2] + t * b[2], [0, 1, 2].map(|k| s * ca[k] + t * cb[k])))
    }

    /// Vertices behind the attribute slots used by `pick`.
    fn attribute_vertices(&self, pick: &Pick<T>) -> ([usize; 3], usize) {
        match pick.face {
            Some((fi, _)) => (self.faces[fi].verts, 3),
            None => {
                let e = pick.nearest_edge().map(|ei| self.edges[ei].verts).unwrap_or([0, 0]);
                ([e[0], e[1], 0], 2)
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[derive(Clone)]
struct Pick<T> {
    face: Option<(usize, T)>,
    edges: Vec<(usize, T)>,
}

impl<T> Default for Pick<T> {
    fn default() -> Self {
        Self {
            face: None,
            edges: Vec::new(),
        }
    }
}

impl<T: Scalar> Pick<T> {
    fn nearest_edge(&self) -> Option<usize> {
        self.edges.iter().min_by(|a, b| by_depth(a.1, b.1)).map(|&(ei, _)| ei)
    }
}

struct Fragment<S> {
    coverage: S,
    depth: S,
    color: [S; 3],
}

fn by_depth<S: Scalar>(a: S, b: S) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal)
}

/// Renders color, alpha, and expected depth.
pub fn render<T: Scalar>(
    scene: &ComposedScene<'_, T>,
    camera: &CameraSpec<T>,
    settings: &RenderSettings<T>,
) -> Result<RenderOutput<T>> {
    let prep = Prepared::new(scene, camera, settings)?;
    let (w, h) = (prep.width, prep.height);
    let rows: Vec<Vec<[T; 5]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut picks = vec![Pick::default(); prep.objects];
            let mut frags: Vec<(usize, Fragment<T>)> = Vec::new();
            let mut dcov = Vec::new();
            (0..w)
                .map(|x| {
                    prep.select(x, y, &mut picks);
                    frags.clear();
                    for (oi, pick) in picks.iter().enumerate() {
                        let Some(coverage) = prep.coverage(pick.face.is_some(), &pick.edges, &mut dcov) else {
                            continue;
                        };
                        if let Some((depth, color)) = prep.attributes(pick, x, y, |t, _| t) {
                            frags.push((oi, Fragment { coverage, depth, color }));
                        }
                    }
                    frags.sort_by(|a, b| by_depth(a.1.depth, b.1.depth).then(a.0.cmp(&b.0)));
                    let mut out = [T::zero(); 5];
                    let mut trans = T::one();
                    for (_, fr) in &frags {
                        let wgt = trans * fr.coverage;
                        for k in 0..3 {
                            out[k] += wgt * fr.color[k];
                        }
                        out[3] += wgt;
                        out[4] += wgt * fr.depth;
                        trans *= T::one() - fr.coverage;
                    }
                    out
                })
                .collect()
        })
        .collect();
    let mut rgb = Array3::zeros((3, h, w));
    let mut alpha = Array2::zeros((h, w));
    let mut depth = Array2::zeros((h, w));
    for (y, row) in rows.iter().enumerate() {
        for (x, px) in row.iter().enumerate() {
            for k in 0..3 {
                rgb[[k, y, x]] = px[k];
            }
            alpha[[y, x]] = px[3];
            depth[[y, x]] = px[4];
        }
    }
    Ok(RenderOutput { rgb, alpha, depth })
}

/// Expected depth under the same soft rasterization as [`render`].
pub fn render_depth<T: Scalar>(
    scene: &ComposedScene<'_, T>,
    camera: &CameraSpec<T>,
    settings: &RenderSettings<T>,
) -> Result<Plane<T>> {
    Ok(render(scene, camera, settings)?.depth)
}

/// Screen-space Jacobian `d(u, v, depth) / d(params)` of every vertex.
fn vertex_jacobians<T: Scalar>(scene: &ComposedScene<'_, T>, camera: &CameraSpec<T>) -> Vec<[[T; 7]; 3]> {
    type D7<T> = Dual<T, 7>;
    let mut out = Vec::new();
    for obj in &scene.objects {
        let p = obj.params.to_array();
        let v: [D7<T>; 7] = std::array::from_fn(|i| D7::variable(p[i], i));
        let rot = rotation_matrix([v[1], v[2], v[3]]);
        for &q in &obj.mesh.vertices {
            let world = place_point(q.map(D7::constant), v[0], &rot, [v[4], v[5], v[6]]);
            out.push(camera.project(world).map(|c| c.eps));
        }
    }
    out
}

fn check_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::validation(format!(
            "{what} gradient has shape {got:?}, expected {want:?}"
        )));
    }
    Ok(())
}

/// Gradient of a scalar loss with respect to every object's placement, given
/// the loss gradient with respect to the outputs of [`render`].
pub fn render_backward<T: Scalar>(
    scene: &ComposedScene<'_, T>,
    camera: &CameraSpec<T>,
    settings: &RenderSettings<T>,
    upstream: &RenderGrad<'_, T>,
) -> Result<Vec<ParamGrad<T>>> {
    let prep = Prepared::new(scene, camera, settings)?;
    let (w, h) = (prep.width, prep.height);
    if let Some(g) = upstream.rgb {
        check_shape("rgb", g.shape(), &[3, h, w])?;
    }
    if let Some(g) = upstream.alpha {
        check_shape("alpha", g.shape(), &[h, w])?;
    }
    if let Some(g) = upstream.depth {
        check_shape("depth", g.shape(), &[h, w])?;
    }
    let jac = vertex_jacobians(scene, camera);
    let n_obj = prep.objects;

    let rows: Vec<Vec<ParamGrad<T>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut acc = vec![[T::zero(); 7]; n_obj];
            let mut picks = vec![Pick::default(); n_obj];
            let mut frags: Vec<(usize, Fragment<D<T>>, Vec<T>)> = Vec::new();
            for x in 0..w {
                let mut g = [T::zero(); 5];
                if let Some(r) = upstream.rgb {
                    for k in 0..3 {
                        g[k] = r[[k, y, x]];
                    }
                }
                if let Some(a) = upstream.alpha {
                    g[3] = a[[y, x]];
                }
                if let Some(d) = upstream.depth {
                    g[4] = d[[y, x]];
                }
                if g.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                prep.select(x, y, &mut picks);
                frags.clear();
                for (oi, pick) in picks.iter().enumerate() {
                    let mut dcov = Vec::new();
                    let Some(coverage) = prep.coverage(pick.face.is_some(), &pick.edges, &mut dcov) else {
                        continue;
                    };
                    if let Some((depth, color)) = prep.attributes(pick, x, y, D::variable) {
                        frags.push((
                            oi,
                            Fragment {
                                coverage: D::constant(coverage),
                                depth,
                                color,
                            },
                            dcov,
                        ));
                    }
                }
                if frags.is_empty() {
                    continue;
                }
                frags.sort_by(|a, b| by_depth(a.1.depth.re, b.1.depth.re).then(a.0.cmp(&b.0)));
                let n = frags.len();
                let value = |f: &Fragment<D<T>>| [f.color[0].re, f.color[1].re, f.color[2].re, T::one(), f.depth.re];
                // Composite of everything behind fragment j: out_j = D_j q_j + (1 - D_j) out_{j+1}.
                let mut behind = vec![[T::zero(); 5]; n + 1];
                for j in (0..n).rev() {
                    let d = frags[j].1.coverage.re;
                    let q = value(&frags[j].1);
                    for c in 0..5 {
                        behind[j][c] = d * q[c] + (T::one() - d) * behind[j + 1][c];
                    }
                }
                let (px, py) = (lit::<T>(x as f64 + 0.5), lit::<T>(y as f64 + 0.5));
                let mut trans = T::one();
                for (j, (oi, fr, dcov)) in frags.iter().enumerate() {
                    let pick = &picks[*oi];
                    let d = fr.coverage.re;
                    let q = value(fr);
                    let mut g_cov = T::zero();
                    for c in 0..5 {
                        g_cov += g[c] * (q[c] - behind[j + 1][c]);
                    }
                    g_cov *= trans;
                    let front = trans * d;
                    let slot_acc = &mut acc[*oi];
                    let mut push = |vi: usize, m: usize, sg: T| {
                        if sg != T::zero() {
                            let jv = &jac[vi][m];
                            for p in 0..7 {
                                slot_acc[p] += sg * jv[p];
                            }
                        }
                    };
                    // Coverage through each edge's squared distance.
                    for (&(ei, _), &dd) in pick.edges.iter().zip(dcov) {
                        if dd == T::zero() {
                            continue;
                        }
                        let [va, vb] = prep.edges[ei].verts;
                        let (sa, sb) = (prep.screen[va], prep.screen[vb]);
                        let a4 = [0, 1].map(|m| Dual::<T, 4>::variable(sa[m], m));
                        let b4 = [0, 1].map(|m| Dual::<T, 4>::variable(sb[m], 2 + m));
                        let z = Dual::<T, 4>::constant(T::zero());
                        let (d2, _) = segment(
                            Dual::constant(px),
                            Dual::constant(py),
                            [a4[0], a4[1], z],
                            [b4[0], b4[1], z],
                        );
                        let scale = g_cov * dd;
                        push(va, 0, scale * d2.eps[0]);
                        push(va, 1, scale * d2.eps[1]);
                        push(vb, 0, scale * d2.eps[2]);
                        push(vb, 1, scale * d2.eps[3]);
                    }
                    // Depth and color through the interpolation vertices.
                    let (verts, used) = prep.attribute_vertices(pick);
                    for (slot, &vi) in verts.iter().enumerate().take(used) {
                        for m in 0..3 {
                            let s = 3 * slot + m;
                            let mut sg = g[4] * front * fr.depth.eps[s];
                            for k in 0..3 {
                                sg += g[k] * front * fr.color[k].eps[s];
                            }
                            push(vi, m, sg);
                        }
                    }
                    trans *= T::one() - d;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![[T::zero(); 7]; n_obj];
    for row in rows {
        for (t, r) in total.iter_mut().zip(row) {
            for p in 0..7 {
                t[p] += r[p];
            }
        }
    }
    Ok(total)
}
