//! Indexed triangle meshes, point clouds and dense scalar grids.
//!
//! Everything downstream (template, deformation, registration, metrics)
//! exchanges geometry through these three types. Meshes are validated on
//! construction and immutable afterwards.

mod io;
mod primitives;
mod sample;
mod subdivide;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{obj_to_string, parse_obj, read_obj, read_ply, read_xyz, write_obj, write_ply, write_xyz, IoError};
pub use primitives::{grid, icosphere};
pub use sample::sample_surface;
pub(crate) use sample::sample_surface_with_faces;
pub use subdivide::{subdivide_region, subdivide_region_tracked, Subdivision};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Faces below this area carry no weight in normal estimation.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Normal assigned to vertices whose incident faces are all degenerate.
pub const FALLBACK_NORMAL: [f64; 3] = [0.0, 0.0, 1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("face {face} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("face {0} references the same vertex twice")]
    RepeatedVertex(usize),
    #[error("normals length {normals} does not match point count {points}")]
    NormalCount { points: usize, normals: usize },
    #[error("normal {0} is not unit length")]
    NonUnitNormal(usize),
    #[error("face subset is empty")]
    EmptyFaceSubset,
    #[error("face subset references face {0} outside the mesh")]
    FaceOutOfRange(usize),
    #[error("subdivision levels must be at least 1")]
    ZeroLevels,
    #[error("mesh has zero total area")]
    ZeroArea,
    #[error("sample count must be positive")]
    ZeroSamples,
    #[error("grid {0}")]
    InvalidGrid(String),
}

/// Triangle mesh with counter-clockwise (outward) winding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let count = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &index in f {
                if index >= count {
                    return Err(MeshError::IndexOutOfRange { face: fi, index, count });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::RepeatedVertex(fi));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn into_parts(self) -> (Vec<Vec3>, Vec<[usize; 3]>) {
        (self.vertices, self.faces)
    }

    /// Same connectivity, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Self {
        assert_eq!(vertices.len(), self.vertices.len(), "vertex count must not change");
        Self { vertices, faces: self.faces.clone() }
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized normal; its length is twice the face area.
    pub fn face_cross(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_cross(face).norm()
    }

    pub fn face_normal(&self, face: usize) -> Vec3 {
        let n = self.face_cross(face);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::from(FALLBACK_NORMAL)
        }
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounding_box(&self) -> Option<Aabb> {
        Aabb::from_points(&self.vertices)
    }

    pub fn translated(&self, t: Vec3) -> Self {
        self.with_vertices(self.vertices.iter().map(|v| v + t).collect())
    }

    /// Number of faces incident to each undirected edge.
    pub fn edge_face_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *counts.entry(sorted_pair(f[k], f[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        counts
    }

    /// V - E + F over vertices referenced by at least one face.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &v in f {
                used[v] = true;
            }
        }
        let v = used.iter().filter(|u| **u).count() as i64;
        let e = extract_edges(self).len() as i64;
        v - e + self.faces.len() as i64
    }

    /// Every edge bounds at most two faces.
    pub fn is_edge_manifold(&self) -> bool {
        self.edge_face_counts().values().all(|&c| c <= 2)
    }

    /// Every edge bounds exactly two faces.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_face_counts().values().all(|&c| c == 2)
    }

    /// Every interior edge is traversed once in each direction.
    pub fn is_consistently_oriented(&self) -> bool {
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        directed.iter().all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)).is_none_or(|&m| m == 1))
    }

    /// Closed boundary loops, each ordered along the boundary direction of
    /// its adjacent faces. Loops are sorted by their smallest vertex index.
    pub fn boundary_loops(&self) -> Vec<Vec<usize>> {
        let counts = self.edge_face_counts();
        let mut next: HashMap<usize, usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                if counts[&sorted_pair(a, b)] == 1 {
                    next.insert(a, b);
                }
            }
        }
        let mut starts: Vec<usize> = next.keys().copied().collect();
        starts.sort_unstable();
        let mut seen = vec![false; self.vertices.len()];
        let mut loops = Vec::new();
        for s in starts {
            if seen[s] {
                continue;
            }
            let mut lp = vec![s];
            seen[s] = true;
            let mut cur = s;
            while let Some(&n) = next.get(&cur) {
                if n == s || seen[n] {
                    break;
                }
                seen[n] = true;
                lp.push(n);
                cur = n;
            }
            loops.push(lp);
        }
        loops
    }

    /// Vertex-to-vertex adjacency lists, sorted ascending.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (a, b) in extract_edges(self) {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Keeps only the listed faces and compacts vertices. Returns the new
    /// mesh and the old-to-new vertex map.
    pub fn submesh(&self, keep_faces: &[usize]) -> (Mesh, Vec<Option<usize>>) {
        let mut map = vec![None; self.vertices.len()];
        let mut used = vec![false; self.vertices.len()];
        for &f in keep_faces {
            for &v in &self.faces[f] {
                used[v] = true;
            }
        }
        let mut vertices = Vec::new();
        for (i, u) in used.iter().enumerate() {
            if *u {
                map[i] = Some(vertices.len());
                vertices.push(self.vertices[i]);
            }
        }
        let faces = keep_faces
            .iter()
            .map(|&f| {
                let [a, b, c] = self.faces[f];
                [map[a].unwrap(), map[b].unwrap(), map[c].unwrap()]
            })
            .collect();
        (Mesh { vertices, faces }, map)
    }

    /// Concatenates two meshes; indices of `other` are shifted.
    pub fn merged(&self, other: &Mesh) -> Mesh {
        let offset = self.vertices.len();
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut faces = self.faces.clone();
        faces.extend(other.faces.iter().map(|f| [f[0] + offset, f[1] + offset, f[2] + offset]));
        Mesh { vertices, faces }
    }

    pub fn flipped(&self) -> Mesh {
        Mesh {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }
}

pub(crate) fn sorted_pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Each undirected edge once, pairs ascending, list sorted.
pub fn extract_edges(mesh: &Mesh) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = mesh
        .faces
        .iter()
        .flat_map(|f| (0..3).map(move |k| sorted_pair(f[k], f[(k + 1) % 3])))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Area-weighted vertex normals. Vertices without a non-degenerate incident
/// face receive [`FALLBACK_NORMAL`].
pub fn compute_vertex_normals(mesh: &Mesh) -> Vec<Vec3> {
    compute_vertex_normals_flagged(mesh).0
}

/// Like [`compute_vertex_normals`], also returning which vertices fell back.
pub fn compute_vertex_normals_flagged(mesh: &Mesh) -> (Vec<Vec3>, Vec<bool>) {
    let mut acc = vec![Vec3::zeros(); mesh.vertices.len()];
    for (fi, f) in mesh.faces.iter().enumerate() {
        let cross = mesh.face_cross(fi);
        if 0.5 * cross.norm() < DEGENERATE_AREA {
            continue;
        }
        for &v in f {
            acc[v] += cross;
        }
    }
    let mut flags = vec![false; acc.len()];
    let normals = acc
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                flags[i] = true;
                Vec3::from(FALLBACK_NORMAL)
            }
        })
        .collect();
    (normals, flags)
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min: min.into(), max: max.into() }
    }

    pub fn from_points(points: &[Vec3]) -> Option<Self> {
        let first = points.first()?;
        let (mut lo, mut hi) = (*first, *first);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Some(Self::new(lo, hi))
    }

    pub fn lo(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn hi(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.lo() + self.hi())
    }

    pub fn extent(&self) -> Vec3 {
        self.hi() - self.lo()
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Grows each side by `fraction` of its extent.
    pub fn inflated(&self, fraction: f64) -> Self {
        let pad = self.extent() * fraction;
        Self::new(self.lo() - pad, self.hi() + pad)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Points with optional unit normals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, normals: None }
    }

    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self, MeshError> {
        if normals.len() != points.len() {
            return Err(MeshError::NormalCount { points: points.len(), normals: normals.len() });
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(MeshError::NonUnitNormal(i));
        }
        Ok(Self { points, normals: Some(normals) })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, rotation: &nalgebra::Rotation3<f64>, translation: Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| rotation * p + translation).collect(),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(|n| rotation * n).collect()),
        }
    }
}

/// Dense samples on a regular lattice; `values[x + nx * (y + ny * z)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    resolution: [usize; 3],
    origin: Vec3,
    spacing: [f64; 3],
    values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(resolution: [usize; 3], origin: Vec3, spacing: [f64; 3], values: Vec<f64>) -> Result<Self, MeshError> {
        if resolution.contains(&0) {
            return Err(MeshError::InvalidGrid("resolution must be positive".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(MeshError::InvalidGrid("spacing must be positive".into()));
        }
        let expected = resolution.iter().product::<usize>();
        if values.len() != expected {
            return Err(MeshError::InvalidGrid(format!("expected {expected} values, got {}", values.len())));
        }
        Ok(Self { resolution, origin, spacing, values })
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    pub fn value(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                x as f64 * self.spacing[0],
                y as f64 * self.spacing[1],
                z as f64 * self.spacing[2],
            )
    }

    /// Trilinear interpolation; points outside the lattice are clamped.
    pub fn interpolate(&self, p: &Vec3) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for k in 0..3 {
            let t = ((p[k] - self.origin[k]) / self.spacing[k]).clamp(0.0, (self.resolution[k] - 1) as f64);
            let i = (t.floor() as usize).min(self.resolution[k].saturating_sub(2));
            base[k] = i;
            frac[k] = t - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for k in 0..3 {
                idx[k] = (base[k] + o[k]).min(self.resolution[k] - 1);
                w *= if o[k] == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            acc += w * self.value(idx[0], idx[1], idx[2]);
        }
        acc
    }

    /// Raw little-endian f64 dump plus a JSON header, for debugging.
    pub fn write_raw(&self, raw_path: &std::path::Path, header_path: &std::path::Path) -> std::io::Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(raw_path, bytes)?;
        let header = serde_json::json!({
            "resolution": self.resolution,
            "origin": [self.origin.x, self.origin.y, self.origin.z],
            "spacing": self.spacing,
            "dtype": "f64-le",
            "layout": "x-fastest",
        });
        std::fs::write(header_path, serde_json::to_string_pretty(&header).unwrap())
    }
}


#[cfg(test)]
mod tests {
    use super::tests_support::icosahedron;
    use super::*;

    fn tri() -> Mesh {
        Mesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }


    #[test]
    fn rejects_bad_faces() {
        let v = vec![Vec3::zeros(); 3];
        assert!(matches!(Mesh::new(v.clone(), vec![[0, 1, 3]]), Err(MeshError::IndexOutOfRange { .. })));
        assert_eq!(Mesh::new(v, vec![[0, 1, 1]]), Err(MeshError::RepeatedVertex(0)));
    }

    #[test]
    fn single_triangle_normals_point_up() {
        for n in compute_vertex_normals(&tri()) {
            assert!((n - Vec3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn equal_area_corner_normal_is_diagonal() {
        // Three unit right triangles meeting at (1,1,1), one on each of the
        // faces x=1, y=1, z=1 of the unit cube, wound outward.
        let c = Vec3::new(1.0, 1.0, 1.0);
        let vertices = vec![
            c,
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 1.0),
        ];
        let faces = vec![[0, 1, 2], [0, 2, 3], [0, 3, 1]];
        let mesh = Mesh::new(vertices, faces).unwrap();
        for f in 0..3 {
            assert!((mesh.face_area(f) - 0.5).abs() < 1e-15);
        }
        let n = compute_vertex_normals(&mesh)[0];
        let expected = Vec3::new(1.0, 1.0, 1.0).normalize();
        assert!((n - expected).norm() < 1e-6, "{n:?}");
    }

    #[test]
    fn degenerate_vertices_fall_back() {
        let mesh = Mesh::new(
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let (normals, flags) = compute_vertex_normals_flagged(&mesh);
        assert!(flags.iter().all(|f| *f));
        assert!(normals.iter().all(|n| *n == Vec3::from(FALLBACK_NORMAL)));
    }

    #[test]
    fn icosahedron_normals_near_radial() {
        let mesh = icosahedron();
        for (v, n) in mesh.vertices().iter().zip(compute_vertex_normals(&mesh)) {
            let angle = v.normalize().dot(&n).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(angle < 2.0, "angle {angle}");
        }
    }

    #[test]
    fn edge_counts() {
        assert_eq!(extract_edges(&tri()), vec![(0, 1), (0, 2), (1, 2)]);
        let strip = Mesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::new(1.0, 1.0, 0.0)],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        assert_eq!(extract_edges(&strip).len(), 5);
        let ico = icosahedron();
        assert_eq!(extract_edges(&ico).len(), 30);
        assert_eq!(ico.euler_characteristic(), 2);
        assert!(ico.is_watertight());
        assert!(ico.is_consistently_oriented());
    }

    #[test]
    fn boundary_loop_of_strip() {
        let strip = Mesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::new(1.0, 1.0, 0.0)],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        let loops = strip.boundary_loops();
        assert_eq!(loops, vec![vec![0, 1, 3, 2]]);
    }

    #[test]
    fn grid_interpolation_reproduces_linear_field() {
        let res = [4, 5, 6];
        let spacing = [0.5, 0.25, 0.2];
        let origin = Vec3::new(-1.0, 0.0, 2.0);
        let f = |p: Vec3| 2.0 * p.x - p.y + 3.0 * p.z;
        let mut values = Vec::new();
        for z in 0..6 {
            for y in 0..5 {
                for x in 0..4 {
                    values.push(f(origin + Vec3::new(x as f64 * 0.5, y as f64 * 0.25, z as f64 * 0.2)));
                }
            }
        }
        let grid = ScalarGrid::new(res, origin, spacing, values).unwrap();
        let p = Vec3::new(-0.3, 0.61, 2.33);
        assert!((grid.interpolate(&p) - f(p)).abs() < 1e-12);
        assert!(ScalarGrid::new(res, origin, spacing, vec![0.0; 3]).is_err());
    }
}
