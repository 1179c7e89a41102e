//! Skeleton, pose parameters, linear blend skinning and pose fitting for the
//! procedural body.

mod procedural;

use nalgebra::{Matrix3, Rotation3, Unit};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_line::{centroid, FeatureLine, FeatureLineAnnotation, LandmarkKind, LineId};
use crate::mesh::{Mesh, Vec3};

pub use procedural::{build as procedural_body, BodyLayout};

pub const JOINT_NAMES: [&str; 14] = [
    "pelvis",
    "spine",
    "shoulder_l",
    "shoulder_r",
    "elbow_l",
    "elbow_r",
    "wrist_l",
    "wrist_r",
    "hip_l",
    "hip_r",
    "knee_l",
    "knee_r",
    "ankle_l",
    "ankle_r",
];
/// Pose slots: global rotation followed by one per joint.
pub const POSE_SLOTS: usize = JOINT_NAMES.len() + 1;
pub const LAMBDA_REG: f64 = 1e-5;
pub const FIT_MAX_ITERS: usize = 100;
pub const FIT_MIN_IMPROVEMENT: f64 = 1e-6;
pub const FIT_FD_STEP: f64 = 1e-5;

const ACTIVE_JOINTS: [&str; 10] =
    ["pelvis", "spine", "shoulder_l", "shoulder_r", "elbow_l", "elbow_r", "hip_l", "hip_r", "knee_l", "knee_r"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoseError {
    #[error("pose has {got} slots, skeleton needs {expected}")]
    Length { expected: usize, got: usize },
    #[error("active masks differ")]
    MaskMismatch,
    #[error("parents do not form a tree rooted at joint 0")]
    NotATree,
    #[error("skin weights of vertex {0} are invalid")]
    Weights(usize),
    #[error("no annotations")]
    NoAnnotations,
    #[error("annotations contain no torso line (ne, wa, sh)")]
    NoTorsoLines,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<Vec3>,
    parents: Vec<usize>,
    names: Vec<String>,
}

impl Skeleton {
    /// Joint 0 is the root and is its own parent; every other joint's parent
    /// must precede it.
    pub fn new(joints: Vec<Vec3>, parents: Vec<usize>, names: Vec<String>) -> Result<Self, PoseError> {
        if joints.is_empty() || parents.len() != joints.len() || names.len() != joints.len() || parents[0] != 0 {
            return Err(PoseError::NotATree);
        }
        if parents.iter().enumerate().skip(1).any(|(j, &p)| p >= j) {
            return Err(PoseError::NotATree);
        }
        Ok(Self { joints, parents, names })
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            joints: self.joints.iter().map(|j| rotation * j + translation).collect(),
            parents: self.parents.clone(),
            names: self.names.clone(),
        }
    }
}

/// Axis-angle rotation per slot; slot 0 is the global rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    theta: Vec<[f64; 3]>,
    active_mask: Vec<bool>,
}

pub fn default_active_mask() -> Vec<bool> {
    let mut mask = vec![false; POSE_SLOTS];
    for (j, name) in JOINT_NAMES.iter().enumerate() {
        mask[j + 1] = ACTIVE_JOINTS.contains(name);
    }
    mask
}

impl Pose {
    /// Inactive entries are forced to zero.
    pub fn new(theta: Vec<[f64; 3]>, active_mask: Vec<bool>) -> Result<Self, PoseError> {
        if theta.len() != active_mask.len() {
            return Err(PoseError::Length { expected: active_mask.len(), got: theta.len() });
        }
        let theta = theta.iter().zip(&active_mask).map(|(t, &a)| if a { *t } else { [0.0; 3] }).collect();
        Ok(Self { theta, active_mask })
    }

    pub fn zero() -> Self {
        Self { theta: vec![[0.0; 3]; POSE_SLOTS], active_mask: default_active_mask() }
    }

    /// Sets one joint's rotation (ignored when the joint is inactive).
    pub fn with_joint(mut self, joint: usize, axis_angle: Vec3) -> Self {
        if self.active_mask[joint + 1] {
            self.theta[joint + 1] = axis_angle.into();
        }
        self
    }

    pub fn theta(&self) -> &[[f64; 3]] {
        &self.theta
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active_mask
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Number of free scalar parameters.
    pub fn active_count(&self) -> usize {
        3 * self.active_mask.iter().filter(|&&a| a).count()
    }

    pub fn active_params(&self) -> Vec<f64> {
        self.theta.iter().zip(&self.active_mask).filter(|(_, &a)| a).flat_map(|(t, _)| *t).collect()
    }

    pub fn with_active_params(&self, params: &[f64]) -> Self {
        assert_eq!(params.len(), self.active_count());
        let mut theta = self.theta.clone();
        let mut k = 0;
        for (slot, &a) in self.active_mask.iter().enumerate() {
            if a {
                theta[slot] = [params[k], params[k + 1], params[k + 2]];
                k += 3;
            }
        }
        Self { theta, active_mask: self.active_mask.clone() }
    }

    /// Global rotation slot, effective only when unmasked.
    pub fn with_global(mut self, axis_angle: Vec3) -> Self {
        if self.active_mask[0] {
            self.theta[0] = axis_angle.into();
        }
        self
    }

    pub fn max_angle(&self) -> f64 {
        self.theta.iter().map(|t| Vec3::from(*t).norm()).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pose serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let raw: Pose = serde_json::from_str(text)?;
        Pose::new(raw.theta, raw.active_mask).map_err(serde::de::Error::custom)
    }
}

/// Rotation matrix of an axis-angle vector; exactly the identity at zero.
pub fn axis_angle_matrix(v: &[f64; 3]) -> Matrix3<f64> {
    let w = Vec3::from(*v);
    let angle = w.norm();
    if angle == 0.0 {
        return Matrix3::identity();
    }
    Rotation3::from_axis_angle(&Unit::new_unchecked(w / angle), angle).into_inner()
}

pub type SkinWeights = Vec<Vec<(usize, f64)>>;

/// Per-vertex body part label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Torso,
    Waist,
    UpperLimbL,
    UpperLimbR,
    LowerLimbL,
    LowerLimbR,
    UpperLegL,
    UpperLegR,
    LowerLegL,
    LowerLegR,
}

/// Side-agnostic grouping of regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionClass {
    Torso,
    UpperLimb,
    LowerLimb,
    Waist,
    UpperLeg,
    LowerLeg,
}

impl Region {
    pub const ALL: [Region; 10] = [
        Region::Torso,
        Region::Waist,
        Region::UpperLimbL,
        Region::UpperLimbR,
        Region::LowerLimbL,
        Region::LowerLimbR,
        Region::UpperLegL,
        Region::UpperLegR,
        Region::LowerLegL,
        Region::LowerLegR,
    ];

    pub fn class(self) -> RegionClass {
        match self {
            Region::Torso => RegionClass::Torso,
            Region::Waist => RegionClass::Waist,
            Region::UpperLimbL | Region::UpperLimbR => RegionClass::UpperLimb,
            Region::LowerLimbL | Region::LowerLimbR => RegionClass::LowerLimb,
            Region::UpperLegL | Region::UpperLegR => RegionClass::UpperLeg,
            Region::LowerLegL | Region::LowerLegR => RegionClass::LowerLeg,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    rest_mesh: Mesh,
    skeleton: Skeleton,
    skin_weights: SkinWeights,
}

/// Per-joint world rotation and joint displacement for a pose.
#[derive(Debug, Clone)]
pub struct JointFrames {
    pub rotations: Vec<Matrix3<f64>>,
    pub displacements: Vec<Vec3>,
}

impl BodyModel {
    pub fn new(rest_mesh: Mesh, skeleton: Skeleton, skin_weights: SkinWeights) -> Result<Self, PoseError> {
        if skin_weights.len() != rest_mesh.vertex_count() {
            return Err(PoseError::Weights(skin_weights.len()));
        }
        for (v, w) in skin_weights.iter().enumerate() {
            let sum: f64 = w.iter().map(|&(_, x)| x).sum();
            if w.iter().any(|&(j, x)| j >= skeleton.len() || x < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(PoseError::Weights(v));
            }
        }
        Ok(Self { rest_mesh, skeleton, skin_weights })
    }

    pub fn rest_mesh(&self) -> &Mesh {
        &self.rest_mesh
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn skin_weights(&self) -> &SkinWeights {
        &self.skin_weights
    }

    /// Replaces geometry and weights together, e.g. after subdivision.
    pub fn with_mesh(&self, rest_mesh: Mesh, skin_weights: SkinWeights) -> Result<Self, PoseError> {
        Self::new(rest_mesh, self.skeleton.clone(), skin_weights)
    }

    /// Applies a rigid transform to both the mesh and the joints.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: Vec3) -> Self {
        let verts = self.rest_mesh.vertices().iter().map(|v| rotation * v + translation).collect();
        Self {
            rest_mesh: self.rest_mesh.with_vertices(verts),
            skeleton: self.skeleton.transformed(rotation, translation),
            skin_weights: self.skin_weights.clone(),
        }
    }

    pub fn check_pose(&self, pose: &Pose) -> Result<(), PoseError> {
        if pose.len() != self.skeleton.len() + 1 {
            return Err(PoseError::Length { expected: self.skeleton.len() + 1, got: pose.len() });
        }
        Ok(())
    }

    pub fn joint_frames(&self, pose: &Pose) -> Result<JointFrames, PoseError> {
        self.check_pose(pose)?;
        let n = self.skeleton.len();
        let joints = &self.skeleton.joints;
        let mut rotations = vec![Matrix3::identity(); n];
        let mut displacements = vec![Vec3::zeros(); n];
        rotations[0] = axis_angle_matrix(&pose.theta[0]) * axis_angle_matrix(&pose.theta[1]);
        for j in 1..n {
            let p = self.skeleton.parents[j];
            rotations[j] = rotations[p] * axis_angle_matrix(&pose.theta[j + 1]);
            displacements[j] = displacements[p] + (rotations[p] - Matrix3::identity()) * (joints[j] - joints[p]);
        }
        Ok(JointFrames { rotations, displacements })
    }

    /// Posed joint positions.
    pub fn posed_joints(&self, pose: &Pose) -> Result<Vec<Vec3>, PoseError> {
        let f = self.joint_frames(pose)?;
        Ok(self.skeleton.joints.iter().zip(&f.displacements).map(|(j, d)| j + d).collect())
    }

    fn skin_vertex(&self, frames: &JointFrames, v: usize) -> Vec3 {
        let p = self.rest_mesh.vertices()[v];
        let mut out = p;
        for &(j, w) in &self.skin_weights[v] {
            let jp = self.skeleton.joints[j];
            out += ((frames.rotations[j] - Matrix3::identity()) * (p - jp) + frames.displacements[j]) * w;
        }
        out
    }

    /// Skinned positions of a subset of vertices.
    pub fn pose_vertices(&self, pose: &Pose, indices: &[usize]) -> Result<Vec<Vec3>, PoseError> {
        let frames = self.joint_frames(pose)?;
        Ok(indices.iter().map(|&v| self.skin_vertex(&frames, v)).collect())
    }
}

/// Linear blend skinning in displacement form, so the zero pose reproduces
/// the rest mesh bit for bit.
pub fn pose_mesh(model: &BodyModel, pose: &Pose) -> Result<Mesh, PoseError> {
    let frames = model.joint_frames(pose)?;
    let verts: Vec<Vec3> =
        (0..model.rest_mesh.vertex_count()).into_par_iter().map(|v| model.skin_vertex(&frames, v)).collect();
    Ok(model.rest_mesh.with_vertices(verts))
}

/// Mean squared error over active entries plus `lambda_reg` times the sum of
/// squared predicted entries.
pub fn pose_loss(predicted: &Pose, target: &Pose, lambda_reg: f64) -> Result<f64, PoseError> {
    if predicted.active_mask != target.active_mask {
        return Err(PoseError::MaskMismatch);
    }
    let (p, t) = (predicted.active_params(), target.active_params());
    let mse = if p.is_empty() { 0.0 } else { p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64 };
    let reg: f64 = predicted.theta.iter().flatten().map(|x| x * x).sum();
    Ok(mse + lambda_reg * reg)
}

/// Result of fitting the body to annotated feature lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFit {
    pub pose: Pose,
    /// Rigid alignment applied after skinning: `x -> rotation * x + translation`.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub rms: f64,
    pub iterations: usize,
}

impl PoseFit {
    pub fn identity() -> Self {
        Self {
            pose: Pose::zero(),
            rotation: Matrix3::<f64>::identity().into(),
            translation: [0.0; 3],
            rms: 0.0,
            iterations: 0,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from(self.rotation)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix() * p + Vec3::from(self.translation)
    }

    pub fn apply_mesh(&self, mesh: &Mesh) -> Mesh {
        mesh.with_vertices(mesh.vertices().iter().map(|p| self.apply(p)).collect())
    }
}

/// Best rotation and translation taking `src` onto `dst` in least squares.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> (Matrix3<f64>, Vec3) {
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * fix * u.transpose();
    (r, cd - r * cs)
}

fn second_moment(pts: &[Vec3], c: &Vec3) -> Matrix3<f64> {
    pts.iter().fold(Matrix3::zeros(), |acc, p| acc + (p - c) * (p - c).transpose()) / pts.len().max(1) as f64
}

fn is_torso(kind: LandmarkKind) -> bool {
    matches!(kind, LandmarkKind::Ne | LandmarkKind::Wa | LandmarkKind::Sh)
}

/// Fits active pose parameters so that the centroids of the body's feature
/// lines match the centroids of the annotations.
///
/// Torso lines give an initial rigid alignment (Kabsch with three or more
/// landmarks, translation otherwise); then damped Gauss-Newton with a
/// central-difference Jacobian refines the active joint angles together with
/// the alignment translation. Besides the centroid, each line contributes
/// the difference of its second-moment matrix divided by the annotation's
/// spread, so twists about a ring's own axis stay observable. `rms` is the
/// centroid part only. Hemlines carry no joint and are ignored.
pub fn fit_pose_to_annotations(
    model: &BodyModel,
    lines: &[FeatureLine],
    annotations: &[FeatureLineAnnotation],
) -> Result<PoseFit, PoseError> {
    if annotations.is_empty() {
        return Err(PoseError::NoAnnotations);
    }
    let mut pairs: Vec<(&FeatureLine, Vec3)> = Vec::new();
    let mut shapes: Vec<(Matrix3<f64>, f64)> = Vec::new();
    for a in annotations.iter().filter(|a| a.kind != LandmarkKind::He) {
        let id: LineId = a.id();
        if let Some(l) = lines.iter().find(|l| l.id() == id) {
            let pts = a.points.points();
            let c = centroid(pts);
            let m = second_moment(pts, &c);
            pairs.push((l, c));
            shapes.push((m, m.trace().sqrt().max(1e-9)));
        }
    }
    if !pairs.iter().any(|(l, _)| is_torso(l.kind)) {
        return Err(PoseError::NoTorsoLines);
    }
    let rest = model.rest_mesh.vertices();
    let torso: Vec<(Vec3, Vec3)> =
        pairs.iter().filter(|(l, _)| is_torso(l.kind)).map(|(l, t)| (l.centroid(rest), *t)).collect();
    let (rot, trans0) = if torso.len() >= 3 {
        let (s, d): (Vec<Vec3>, Vec<Vec3>) = torso.iter().copied().unzip();
        kabsch(&s, &d)
    } else {
        let (s, d): (Vec<Vec3>, Vec<Vec3>) = torso.iter().copied().unzip();
        (Matrix3::identity(), centroid(&d) - centroid(&s))
    };

    let base = Pose::zero();
    let n_theta = base.active_count();
    let residuals = |x: &[f64]| -> Vec<f64> {
        let pose = base.with_active_params(&x[..n_theta]);
        let t = trans0 + Vec3::new(x[n_theta], x[n_theta + 1], x[n_theta + 2]);
        let frames = model.joint_frames(&pose).expect("pose length fixed");
        let mut r = Vec::with_capacity(9 * pairs.len());
        let mut shape = Vec::with_capacity(6 * pairs.len());
        for ((l, target), (m, spread)) in pairs.iter().zip(&shapes) {
            let pts: Vec<Vec3> = l.vertex_indices.iter().map(|&v| model.skin_vertex(&frames, v)).collect();
            let c = centroid(&pts);
            let d = rot * c + t - target;
            r.extend([d.x, d.y, d.z]);
            let dm = (rot * second_moment(&pts, &c) * rot.transpose() - m) / *spread;
            shape.extend([dm[(0, 0)], dm[(1, 1)], dm[(2, 2)], dm[(0, 1)], dm[(0, 2)], dm[(1, 2)]]);
        }
        r.extend(shape);
        r
    };
    let joints = 3 * pairs.len();
    let rms_of = |r: &[f64]| (r.iter().map(|x| x * x).sum::<f64>() / (r.len() / 3) as f64).sqrt();
    let joint_rms = |r: &[f64]| (r[..joints].iter().map(|x| x * x).sum::<f64>() / pairs.len() as f64).sqrt();

    let n = n_theta + 3;
    let mut x = vec![0.0; n];
    let mut r = residuals(&x);
    let mut rms = rms_of(&r);
    let mut damping = 1e-3;
    let mut iterations = 0;
    while iterations < FIT_MAX_ITERS {
        iterations += 1;
        let m = r.len();
        let mut jac = nalgebra::DMatrix::zeros(m, n);
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += FIT_FD_STEP;
            xm[k] -= FIT_FD_STEP;
            let (rp, rm) = (residuals(&xp), residuals(&xm));
            for i in 0..m {
                jac[(i, k)] = (rp[i] - rm[i]) / (2.0 * FIT_FD_STEP);
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * nalgebra::DVector::from_vec(r.clone());
        let mut improved = None;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += damping * (1.0 + jtj[(k, k)]);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                damping *= 10.0;
                continue;
            };
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rn = residuals(&xn);
            let rms_n = rms_of(&rn);
            if rms_n < rms {
                damping = (damping * 0.3).max(1e-12);
                improved = Some((xn, rn, rms_n));
                break;
            }
            damping *= 10.0;
        }
        match improved {
            Some((xn, rn, rms_n)) => {
                let gain = rms - rms_n;
                x = xn;
                r = rn;
                rms = rms_n;
                if gain < FIT_MIN_IMPROVEMENT {
                    break;
                }
            }
            None => break,
        }
    }
    let t = trans0 + Vec3::new(x[n_theta], x[n_theta + 1], x[n_theta + 2]);
    Ok(PoseFit {
        pose: base.with_active_params(&x[..n_theta]),
        rotation: rot.into(),
        translation: t.into(),
        rms: joint_rms(&r),
        iterations,
    })
}
