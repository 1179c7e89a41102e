//! Handle-constrained Laplacian surface editing.
//!
//! Handles are hard constraints: their columns are moved to the right-hand
//! side and the free vertices are solved in least squares against the
//! differential coordinates of the input mesh.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{Mesh, Vec3, DEGENERATE_AREA};
use crate::sparse::{conjugate_gradient, CsrMatrix, SolveError};

pub const CG_TOLERANCE: f64 = 1e-10;
pub const MAX_ITER_PER_VERTEX: usize = 10;
/// Triangles with an angle above this (degrees) use uniform weights.
pub const OBTUSE_LIMIT_DEG: f64 = 179.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LaplacianError {
    #[error("no handle vertices given")]
    NoHandles,
    #[error("every vertex is a handle")]
    AllHandles,
    #[error("handle index {0} out of range")]
    HandleOutOfRange(usize),
    #[error("coordinate {axis}: {source}")]
    Solve { axis: usize, source: SolveError },
}

/// Cotangent Laplacian `L` with `(L x)_i = sum_j w_ij (x_i - x_j)`. Rows of
/// vertices touching a degenerate triangle use unit weights; those vertices
/// are flagged in the second return value.
pub fn cotangent_laplacian(mesh: &Mesh) -> (CsrMatrix, Vec<bool>) {
    let n = mesh.vertex_count();
    let cos_limit = OBTUSE_LIMIT_DEG.to_radians().cos();
    let mut uniform = vec![false; n];
    for (fi, f) in mesh.faces().iter().enumerate() {
        let degenerate = mesh.face_area(fi) < DEGENERATE_AREA || {
            let [a, b, c] = mesh.triangle(fi);
            [(a, b, c), (b, c, a), (c, a, b)].iter().any(|(p, q, r)| {
                let (u, v) = (q - p, r - p);
                u.dot(&v) / (u.norm() * v.norm()) < cos_limit
            })
        };
        if degenerate {
            for &v in f {
                uniform[v] = true;
            }
        }
    }
    let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (fi, f) in mesh.faces().iter().enumerate() {
        let tri = mesh.triangle(fi);
        for k in 0..3 {
            // Angle at corner k is opposite edge (k+1, k+2).
            let p = tri[k];
            let (i, j) = (f[(k + 1) % 3], f[(k + 2) % 3]);
            let u = tri[(k + 1) % 3] - p;
            let v = tri[(k + 2) % 3] - p;
            let cross = u.cross(&v).norm();
            let cot = if cross > 0.0 { u.dot(&v) / cross } else { 0.0 };
            *weights.entry((i, j)).or_insert(0.0) += 0.5 * cot;
            *weights.entry((j, i)).or_insert(0.0) += 0.5 * cot;
        }
    }
    let mut triplets = Vec::with_capacity(weights.len() + n);
    let mut diag = vec![0.0; n];
    for (&(i, j), &w) in &weights {
        let w = if uniform[i] { 1.0 } else { w };
        triplets.push((i, j, -w));
        diag[i] += w;
    }
    for (i, d) in diag.into_iter().enumerate() {
        triplets.push((i, i, d));
    }
    (CsrMatrix::from_triplets(n, n, &triplets), uniform)
}

/// Graph Laplacian with unit weights, same sign convention.
pub fn uniform_laplacian(mesh: &Mesh) -> CsrMatrix {
    let n = mesh.vertex_count();
    let nbrs = mesh.vertex_neighbors();
    let mut t = Vec::new();
    for (i, ns) in nbrs.iter().enumerate() {
        for &j in ns {
            t.push((i, j, -1.0));
        }
        t.push((i, i, ns.len() as f64));
    }
    CsrMatrix::from_triplets(n, n, &t)
}

pub(crate) fn apply_to_points(l: &CsrMatrix, x: &[Vec3]) -> Vec<Vec3> {
    (0..l.rows()).map(|r| l.row(r).fold(Vec3::zeros(), |acc, (c, w)| acc + x[c] * w)).collect()
}

#[derive(Debug, Clone)]
pub struct LaplacianSystem {
    pub laplacian: CsrMatrix,
    pub delta: Vec<Vec3>,
    pub handles: BTreeMap<usize, Vec3>,
    pub uniform_rows: Vec<bool>,
    mesh: Mesh,
}

pub fn build_system(mesh: &Mesh, handles: &BTreeMap<usize, Vec3>) -> Result<LaplacianSystem, LaplacianError> {
    if handles.is_empty() {
        return Err(LaplacianError::NoHandles);
    }
    if let Some((&h, _)) = handles.iter().find(|(&h, _)| h >= mesh.vertex_count()) {
        return Err(LaplacianError::HandleOutOfRange(h));
    }
    if handles.len() >= mesh.vertex_count() {
        return Err(LaplacianError::AllHandles);
    }
    let (laplacian, uniform_rows) = cotangent_laplacian(mesh);
    let delta = apply_to_points(&laplacian, mesh.vertices());
    Ok(LaplacianSystem { laplacian, delta, handles: handles.clone(), uniform_rows, mesh: mesh.clone() })
}

impl LaplacianSystem {
    fn split(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        let n = self.mesh.vertex_count();
        let mut free = Vec::with_capacity(n - self.handles.len());
        let mut slot = vec![None; n];
        for v in 0..n {
            if !self.handles.contains_key(&v) {
                slot[v] = Some(free.len());
                free.push(v);
            }
        }
        (free, slot)
    }

    /// Normal-equation matrix `L_F^T L_F` and the three right-hand sides.
    pub fn normal_equations(&self) -> (CsrMatrix, [Vec<f64>; 3]) {
        let (free, slot) = self.split();
        let n = self.mesh.vertex_count();
        let mut lf = Vec::new();
        let mut rhs_full = self.delta.clone();
        for r in 0..n {
            for (c, w) in self.laplacian.row(r) {
                match slot[c] {
                    Some(s) => lf.push((r, s, w)),
                    None => rhs_full[r] -= self.handles[&c] * w,
                }
            }
        }
        let lf = CsrMatrix::from_triplets(n, free.len(), &lf);
        let lft = lf.transpose();
        let rhs = [0, 1, 2].map(|k| lft.mul_vec(&rhs_full.iter().map(|p| p[k]).collect::<Vec<_>>()));
        (lf.gram(), rhs)
    }

    /// Solves for free vertices; handles are copied to their targets.
    pub fn solve(&self) -> Result<Mesh, LaplacianError> {
        let (free, _) = self.split();
        let (a, rhs) = self.normal_equations();
        let shift = self.handles.iter().fold(Vec3::zeros(), |acc, (&h, t)| acc + (t - self.mesh.vertices()[h]))
            / self.handles.len() as f64;
        let max_iter = MAX_ITER_PER_VERTEX * self.mesh.vertex_count();
        let solved: Vec<Result<Vec<f64>, LaplacianError>> = (0..3usize)
            .into_par_iter()
            .map(|k| {
                let x0: Vec<f64> = free.iter().map(|&v| self.mesh.vertices()[v][k] + shift[k]).collect();
                conjugate_gradient(&a, &rhs[k], Some(&x0), CG_TOLERANCE, max_iter)
                    .map(|o| o.x)
                    .map_err(|source| LaplacianError::Solve { axis: k, source })
            })
            .collect();
        let mut coords = Vec::with_capacity(3);
        for s in solved {
            coords.push(s?);
        }
        let mut verts = self.mesh.vertices().to_vec();
        for (s, &v) in free.iter().enumerate() {
            verts[v] = Vec3::new(coords[0][s], coords[1][s], coords[2][s]);
        }
        for (&h, &t) in &self.handles {
            verts[h] = t;
        }
        Ok(self.mesh.with_vertices(verts))
    }

    pub fn dump_matrix_market(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.laplacian.to_matrix_market())
    }
}

pub fn deform(mesh: &Mesh, handles: &BTreeMap<usize, Vec3>) -> Result<Mesh, LaplacianError> {
    build_system(mesh, handles)?.solve()
}
