//! Gated non-rigid registration for detail transfer, and the surface
//! refinement loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_line::{fitting_terms, FeatureLineAnnotation, LineError, PredictedLine};
use crate::laplacian::{cotangent_laplacian, MAX_ITER_PER_VERTEX};
use crate::mesh::{compute_vertex_normals, extract_edges, Mesh, MeshError, PointCloud, Vec3};
use crate::metrics::chamfer_points;
use crate::sparse::{conjugate_gradient, CsrMatrix, SolveError};
use crate::spatial::{KdTree, TriangleBvh};

pub const MAX_NORMAL_ANGLE_DEG: f64 = 60.0;
pub const SIGMA: f64 = 0.01;
pub const MU_START: f64 = 1.0;
pub const MU_DECAY: f64 = 0.5;
pub const MU_FLOOR: f64 = 0.05;
pub const OUTER_ITERATIONS: usize = 10;
pub const MIN_IMPROVEMENT: f64 = 1e-6;
/// Tikhonov term keeping the system positive definite where no data term
/// reaches.
pub const ANCHOR_EPS: f64 = 1e-6;
const CG_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DetailError {
    #[error("empty mesh")]
    EmptyMesh,
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("ground truth has no normals but lambda_nor > 0")]
    MissingNormals,
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Line(#[from] LineError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    None,
    NormalCone,
    DistanceGate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source_vertex: usize,
    pub target_point: Vec3,
    pub target_normal: Vec3,
    pub target_face: usize,
    /// Source vertex to target point.
    pub distance: f64,
    /// Target point back to the source surface.
    pub back_distance: f64,
    pub angle_deg: f64,
    pub valid: bool,
    pub reason: Rejection,
}

/// Geometry queried against while searching correspondences, reusable
/// across calls with the same target.
pub struct TargetIndex<'a> {
    mesh: &'a Mesh,
    bvh: TriangleBvh,
    normals: Vec<Vec3>,
}

impl<'a> TargetIndex<'a> {
    pub fn new(mesh: &'a Mesh) -> Self {
        Self { mesh, bvh: TriangleBvh::new(mesh), normals: compute_vertex_normals(mesh) }
    }

    /// Barycentric blend of vertex normals at `p` on `face`.
    fn normal_at(&self, face: usize, p: &Vec3) -> Vec3 {
        let [a, b, c] = self.mesh.triangle(face);
        let [ia, ib, ic] = self.mesh.faces()[face];
        let area = |x: &Vec3, y: &Vec3, z: &Vec3| (y - x).cross(&(z - x)).norm();
        let total = area(&a, &b, &c);
        let n = if total > 0.0 {
            self.normals[ia] * area(p, &b, &c) + self.normals[ib] * area(&a, p, &c) + self.normals[ic] * area(&a, &b, p)
        } else {
            Vec3::zeros()
        };
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            self.mesh.face_normal(face)
        }
    }
}

/// Closest-point correspondences from every source vertex, gated by the
/// normal cone first and then the two-way distance test.
pub fn find_correspondences(
    source: &Mesh,
    target: &Mesh,
    max_angle_deg: f64,
    sigma: f64,
) -> Result<Vec<Correspondence>, DetailError> {
    if source.is_empty() || target.is_empty() {
        return Err(DetailError::EmptyMesh);
    }
    Ok(correspondences_with(source, &TargetIndex::new(target), max_angle_deg, sigma))
}

pub fn correspondences_with(source: &Mesh, target: &TargetIndex<'_>, max_angle_deg: f64, sigma: f64) -> Vec<Correspondence> {
    let src_normals = compute_vertex_normals(source);
    let src_bvh = TriangleBvh::new(source);
    let cos_max = max_angle_deg.to_radians().cos();
    (0..source.vertex_count())
        .into_par_iter()
        .map(|v| {
            let p = source.vertices()[v];
            let hit = target.bvh.closest_point(&p).expect("target is not empty");
            let tn = target.normal_at(hit.face, &hit.point);
            let cos = src_normals[v].dot(&tn).clamp(-1.0, 1.0);
            let distance = hit.dist2.sqrt();
            let back_distance = src_bvh.closest_point(&hit.point).expect("source is not empty").dist2.sqrt();
            let reason = if !(cos > cos_max) {
                Rejection::NormalCone
            } else if !(distance < sigma && back_distance < sigma) {
                Rejection::DistanceGate
            } else {
                Rejection::None
            };
            Correspondence {
                source_vertex: v,
                target_point: hit.point,
                target_normal: tn,
                target_face: hit.face,
                distance,
                back_distance,
                angle_deg: cos.acos().to_degrees(),
                valid: reason == Rejection::None,
                reason,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationParams {
    pub max_angle_deg: f64,
    pub sigma: f64,
    pub mu_start: f64,
    pub mu_decay: f64,
    pub mu_floor: f64,
    pub outer_iterations: usize,
    pub min_improvement: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            max_angle_deg: MAX_NORMAL_ANGLE_DEG,
            sigma: SIGMA,
            mu_start: MU_START,
            mu_decay: MU_DECAY,
            mu_floor: MU_FLOOR,
            outer_iterations: OUTER_ITERATIONS,
            min_improvement: MIN_IMPROVEMENT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub valid_count: usize,
    pub rejected_normal: usize,
    pub rejected_distance: usize,
    pub mean_dist: f64,
    pub mu: f64,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub mesh: Mesh,
    pub diagnostics: Vec<IterationDiagnostics>,
    /// Set when an iteration found no valid correspondence; the mesh is the
    /// last one before that iteration.
    pub stalled: bool,
}

impl Registration {
    pub fn diagnostics_json(&self) -> String {
        serde_json::to_string_pretty(&self.diagnostics).expect("diagnostics serialize")
    }
}

/// Moves `source` onto `target` by a Laplacian-regularized displacement
/// field. Each outer iteration re-gates correspondences from the current
/// positions and solves
/// `(W + mu L^T L + eps I) d = W (c - v)` per coordinate for the total
/// displacement `d` from the input, where `W` selects valid vertices and
/// `L` is the cotangent Laplacian of the input.
pub fn nonrigid_register(source: &Mesh, target: &Mesh, params: &RegistrationParams) -> Result<Registration, DetailError> {
    if source.is_empty() || target.is_empty() {
        return Err(DetailError::EmptyMesh);
    }
    let n = source.vertex_count();
    let index = TargetIndex::new(target);
    let (lap, _) = cotangent_laplacian(source);
    let ltl = lap.gram();
    let rest = source.vertices();
    let mut current = source.clone();
    let mut disp: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut diagnostics = Vec::new();
    let mut mu = params.mu_start;
    let mut prev_mean = f64::INFINITY;
    for it in 0..params.outer_iterations {
        let corr = correspondences_with(&current, &index, params.max_angle_deg, params.sigma);
        let valid: Vec<&Correspondence> = corr.iter().filter(|c| c.valid).collect();
        let mean_dist = if valid.is_empty() {
            f64::NAN
        } else {
            valid.iter().map(|c| c.distance).sum::<f64>() / valid.len() as f64
        };
        diagnostics.push(IterationDiagnostics {
            iteration: it,
            valid_count: valid.len(),
            rejected_normal: corr.iter().filter(|c| c.reason == Rejection::NormalCone).count(),
            rejected_distance: corr.iter().filter(|c| c.reason == Rejection::DistanceGate).count(),
            mean_dist,
            mu,
        });
        if valid.is_empty() {
            log::warn!("registration iteration {it}: no valid correspondence");
            return Ok(Registration { mesh: current, diagnostics, stalled: true });
        }
        if prev_mean - mean_dist < params.min_improvement {
            break;
        }
        prev_mean = mean_dist;

        let mut w = vec![ANCHOR_EPS; n];
        let mut rhs = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for c in &valid {
            let v = c.source_vertex;
            w[v] += 1.0;
            let goal = c.target_point - rest[v];
            for k in 0..3 {
                rhs[k][v] = goal[k];
            }
        }
        let a: CsrMatrix = CsrMatrix::from_triplets(n, n, &[]).add_scaled(&ltl, mu).add_diagonal(&w);
        let solved: Vec<Result<Vec<f64>, SolveError>> = (0..3usize)
            .into_par_iter()
            .map(|k| {
                conjugate_gradient(&a, &rhs[k], Some(&disp[k]), CG_TOL, MAX_ITER_PER_VERTEX * n).map(|o| o.x)
            })
            .collect();
        for (k, s) in solved.into_iter().enumerate() {
            disp[k] = s?;
        }
        let verts = (0..n).map(|v| rest[v] + Vec3::new(disp[0][v], disp[1][v], disp[2][v])).collect();
        current = source.with_vertices(verts);
        mu = (mu * params.mu_decay).max(params.mu_floor);
    }
    Ok(Registration { mesh: current, diagnostics, stalled: false })
}

/// Weights of the refinement loss. `lambda_chm` scales the Chamfer term so
/// that every term can be switched off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineWeights {
    pub lambda_chm: f64,
    pub lambda_nor: f64,
    pub lambda_lap: f64,
    pub lambda_med: f64,
    pub lambda_line: f64,
    pub lambda_fed: f64,
}

impl Default for RefineWeights {
    fn default() -> Self {
        Self { lambda_chm: 1.0, lambda_nor: 1.6e-4, lambda_lap: 1.0, lambda_med: 0.5, lambda_line: 1.0, lambda_fed: 0.5 }
    }
}

impl RefineWeights {
    pub fn zero() -> Self {
        Self { lambda_chm: 0.0, lambda_nor: 0.0, lambda_lap: 0.0, lambda_med: 0.0, lambda_line: 0.0, lambda_fed: 0.0 }
    }
}

/// Unweighted terms of the refinement loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineTerms {
    pub chm: f64,
    pub nor: f64,
    pub lap: f64,
    pub med: f64,
    pub line: f64,
    pub fed: f64,
}

impl RefineTerms {
    pub fn weighted(&self, w: &RefineWeights) -> f64 {
        w.lambda_chm * self.chm
            + w.lambda_nor * self.nor
            + w.lambda_lap * self.lap
            + w.lambda_med * self.med
            + w.lambda_line * self.line
            + w.lambda_fed * self.fed
    }
}

/// Mean squared edge length.
pub fn mean_squared_edge(mesh: &Mesh) -> f64 {
    let edges = extract_edges(mesh);
    if edges.is_empty() {
        return 0.0;
    }
    let v = mesh.vertices();
    edges.iter().map(|&(a, b)| (v[a] - v[b]).norm_squared()).sum::<f64>() / edges.len() as f64
}

/// Mean squared norm of `x_i - mean(neighbours)`.
pub fn mean_squared_laplacian(mesh: &Mesh) -> f64 {
    let nbrs = mesh.vertex_neighbors();
    let v = mesh.vertices();
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, ns) in nbrs.iter().enumerate() {
        if ns.is_empty() {
            continue;
        }
        let avg = ns.iter().fold(Vec3::zeros(), |a, &j| a + v[j]) / ns.len() as f64;
        sum += (v[i] - avg).norm_squared();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Evaluates every refinement term. The mesh is sampled with `n_samples`
/// points (`seed`), each carrying its face normal; the normal term pairs
/// each sample with its nearest ground-truth point.
pub fn refine_terms(
    mesh: &Mesh,
    ground_truth: &PointCloud,
    lines: &[PredictedLine],
    annotations: &[FeatureLineAnnotation],
    need_normals: bool,
    n_samples: usize,
    seed: u64,
) -> Result<RefineTerms, DetailError> {
    if mesh.is_empty() {
        return Err(DetailError::EmptyMesh);
    }
    if ground_truth.is_empty() {
        return Err(DetailError::EmptyCloud);
    }
    if need_normals && ground_truth.normals().is_none() {
        return Err(DetailError::MissingNormals);
    }
    let (pts, normals, _) = crate::mesh::sample_surface_with_faces(mesh, n_samples, seed)?;
    let chm = chamfer_points(&pts, ground_truth.points()).expect("both sides non-empty");
    let nor = match ground_truth.normals() {
        Some(gt_normals) => {
            let tree = KdTree::new(ground_truth.points());
            let mean_cos = pts
                .iter()
                .zip(&normals)
                .map(|(p, n)| n.dot(&gt_normals[tree.nearest(p).expect("non-empty").0]))
                .sum::<f64>()
                / pts.len() as f64;
            1.0 - mean_cos
        }
        None => 0.0,
    };
    let (mut line, mut fed) = (0.0, 0.0);
    if !lines.is_empty() || !annotations.is_empty() {
        for (l, e) in fitting_terms(lines, annotations)? {
            line += l;
            fed += e;
        }
    }
    Ok(RefineTerms { chm, nor, lap: mean_squared_laplacian(mesh), med: mean_squared_edge(mesh), line, fed })
}

/// `L_chm + lambda_nor L_nor + lambda_lap L_lap + lambda_med L_med +
/// lambda_line L_line + lambda_fed L_fed`.
#[allow(clippy::too_many_arguments)]
pub fn refine_loss(
    mesh: &Mesh,
    ground_truth: &PointCloud,
    lines: &[PredictedLine],
    annotations: &[FeatureLineAnnotation],
    weights: &RefineWeights,
    n_samples: usize,
    seed: u64,
) -> Result<f64, DetailError> {
    let terms = refine_terms(mesh, ground_truth, lines, annotations, weights.lambda_nor > 0.0, n_samples, seed)?;
    Ok(terms.weighted(weights))
}
